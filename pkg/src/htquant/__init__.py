"""Truncated quantization of heavy-tailed gradients for distributed SGD."""

__version__ = "0.1.0"

from .codec import QuantizedMessage, decode_bits, encode_bits
from .errors import HTQError
from .quantizer import Codebook, DensitySpec, build_codebook, dequantize, stochastic_quantize, truncate
from .sim import SimConfig, run
from .solver import ProblemSpec, convergence_bound, error_tq, solve_alpha
from .tail import PowerLawTail, empirical_density, fit_tail

__all__ = [
    "Codebook",
    "DensitySpec",
    "HTQError",
    "PowerLawTail",
    "ProblemSpec",
    "QuantizedMessage",
    "SimConfig",
    "build_codebook",
    "convergence_bound",
    "decode_bits",
    "dequantize",
    "empirical_density",
    "encode_bits",
    "error_tq",
    "fit_tail",
    "run",
    "solve_alpha",
    "stochastic_quantize",
    "truncate",
]
