"""Bit packing and the ``HTQ1`` wire format.

Indices are packed LSB-first, ``b`` bits each, into little-endian bytes with
the final byte zero-padded.  A message is::

    magic "HTQ1" | scheme u8 | b u8 | reserved u16 | alpha f32 | d u32
    | scheme params (TBQ only: k f32, s_alpha u16, s_beta u16) | payload

All header integers and floats are little-endian.
"""

import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import CorruptMessage, IndexTooLarge, InputError, TruncatedPayload

MAGIC = b"HTQ1"
_HEADER = struct.Struct("<4sBBHfI")
_TBQ_PARAMS = struct.Struct("<fHH")

SCHEME_IDS = {"tq": 0, "tnq": 1, "tbq": 2, "qsgd": 3, "nqsgd": 4}
SCHEME_NAMES = {v: k for k, v in SCHEME_IDS.items()}


def payload_size(d, b):
    return math.ceil(d * b / 8)


def encode_bits(indices, b):
    if not 1 <= b <= 8:
        raise InputError(f"b must be in 1..8, got {b}")
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= (1 << b)):
        raise IndexTooLarge(f"indices must lie in [0, {(1 << b) - 1}] for b={b}")
    bits = ((idx[:, None] >> np.arange(b)) & 1).astype(np.uint8).ravel()
    return np.packbits(bits, bitorder="little").tobytes()


def decode_bits(data, b, d):
    if not 1 <= b <= 8:
        raise InputError(f"b must be in 1..8, got {b}")
    need = payload_size(d, b)
    if len(data) < need:
        raise TruncatedPayload(f"payload has {len(data)} bytes, need {need}")
    raw = np.frombuffer(bytes(data[:need]), dtype=np.uint8)
    bits = np.unpackbits(raw, bitorder="little", count=d * b).reshape(d, b)
    return bits.astype(np.int64) @ (1 << np.arange(b, dtype=np.int64))


@dataclass
class QuantizedMessage:
    scheme: str
    bits: int
    alpha: float
    indices: np.ndarray
    k: Optional[float] = None
    s_alpha: Optional[int] = None
    s_beta: Optional[int] = None

    @property
    def d(self):
        return int(np.asarray(self.indices).size)

    def header_size(self):
        return _HEADER.size + (_TBQ_PARAMS.size if self.scheme == "tbq" else 0)

    def nbytes(self):
        return self.header_size() + payload_size(self.d, self.bits)

    def to_bytes(self):
        if self.scheme not in SCHEME_IDS:
            raise InputError(f"unknown scheme {self.scheme!r}")
        head = _HEADER.pack(MAGIC, SCHEME_IDS[self.scheme], self.bits, 0, self.alpha, self.d)
        if self.scheme == "tbq":
            head += _TBQ_PARAMS.pack(self.k, self.s_alpha, self.s_beta)
        return head + encode_bits(self.indices, self.bits)

    @classmethod
    def from_bytes(cls, data):
        data = bytes(data)
        if len(data) < _HEADER.size:
            raise TruncatedPayload(f"message of {len(data)} bytes is shorter than the header")
        magic, sid, b, _, alpha, d = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CorruptMessage(f"bad magic {magic!r}")
        if sid not in SCHEME_NAMES:
            raise CorruptMessage(f"unknown scheme id {sid}")
        if not 1 <= b <= 8:
            raise CorruptMessage(f"bad bit width {b}")
        if not (alpha > 0 and math.isfinite(alpha)):
            raise CorruptMessage(f"bad alpha {alpha}")
        scheme = SCHEME_NAMES[sid]
        off = _HEADER.size
        k = s_alpha = s_beta = None
        if scheme == "tbq":
            if len(data) < off + _TBQ_PARAMS.size:
                raise TruncatedPayload("missing biscaled parameters")
            k, s_alpha, s_beta = _TBQ_PARAMS.unpack_from(data, off)
            off += _TBQ_PARAMS.size
        body = data[off:]
        need = payload_size(d, b)
        if len(body) < need:
            raise TruncatedPayload(f"payload has {len(body)} bytes, need {need}")
        if len(body) > need:
            raise CorruptMessage(f"{len(body) - need} trailing bytes after payload")
        return cls(scheme, b, float(alpha), decode_bits(body, b, d), k, s_alpha, s_beta)
