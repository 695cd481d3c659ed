"""Two-stage quantizer: truncation followed by unbiased stochastic rounding.

A codebook is the ordered set of levels ``l_0 = -alpha < ... < l_s = alpha``.
A value in ``[l_{k-1}, l_k]`` rounds up to ``l_k`` with probability
``(g - l_{k-1}) / (l_k - l_{k-1})`` and down otherwise, which makes the
quantizer mean-exact on ``[-alpha, alpha]``.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    IndexOutOfRange,
    InputError,
    InvalidAlpha,
    LengthMismatch,
    OddSplit,
    OutOfRange,
    SupportMismatch,
)

UNIFORM = "uniform"
CUBEROOT = "cuberoot"
BISCALED = "biscaled"
VARIANTS = (UNIFORM, CUBEROOT, BISCALED)

MAX_BITS = 8


def make_rng(seed):
    """Counter-based generator; ``seed`` may be an int, a SeedSequence or a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class DensitySpec:
    variant: str
    alpha: float
    s: int
    histogram: Optional[object] = None
    k: Optional[float] = None
    s_alpha: Optional[int] = None
    s_beta: Optional[int] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InputError(f"unknown density variant {self.variant!r}")
        if not (self.alpha > 0):
            raise InvalidAlpha(f"alpha must be > 0, got {self.alpha}")
        if int(self.s) != self.s or self.s < 1:
            raise InputError(f"s must be a positive integer, got {self.s}")
        if self.variant == CUBEROOT and self.histogram is None:
            raise InputError("cube-root density needs a source histogram")
        if self.variant == BISCALED:
            if self.k is None or not (0.0 < self.k < 1.0):
                raise InputError(f"biscaled k must lie in (0, 1), got {self.k}")
            if self.s_alpha is None or self.s_beta is None:
                raise InputError("biscaled density needs s_alpha and s_beta")
            if self.s_alpha < 1 or self.s_beta < 1 or self.s_alpha + self.s_beta != self.s:
                raise InputError(
                    f"biscaled split {self.s_alpha}+{self.s_beta} does not match s={self.s}"
                )

    def lambda_s(self, g):
        """Point density at ``g`` (points per unit length)."""
        g = np.asarray(g, dtype=np.float64)
        a = self.alpha
        if self.variant == UNIFORM:
            return np.full_like(g, self.s / (2 * a))
        if self.variant == CUBEROOT:
            h = self.histogram
            z = h.cbrt_integral(-a, a)
            idx = np.clip(np.searchsorted(h.edges, g, side="right") - 1, 0, h.mass.size - 1)
            inside = (g >= h.edges[0]) & (g <= h.edges[-1])
            p = np.where(inside, h.pdf_values[idx], 0.0)
            return np.cbrt(p) / z * self.s
        b = self.k * a
        return np.where(
            np.abs(g) <= b,
            self.s_beta / (2 * b),
            self.s_alpha / (2 * (a - b)),
        )

    def total_points(self):
        """Integral of ``lambda_s`` over ``[-alpha, alpha]``; equals ``s``."""
        a = self.alpha
        if self.variant == UNIFORM:
            return self.s / (2 * a) * 2 * a
        if self.variant == CUBEROOT:
            h = self.histogram
            return self.s * h.cbrt_integral(-a, a) / h.cbrt_integral(-a, a)
        b = self.k * a
        return self.s_beta / (2 * b) * 2 * b + self.s_alpha / (2 * (a - b)) * 2 * (a - b)


@dataclass(frozen=True)
class Codebook:
    levels: np.ndarray

    def __post_init__(self):
        lv = np.asarray(self.levels, dtype=np.float64)
        if lv.ndim != 1 or lv.size < 2:
            raise InputError("codebook needs at least two levels")
        if np.any(np.diff(lv) <= 0):
            raise InputError("codebook levels must be strictly increasing")
        lv.setflags(write=False)
        object.__setattr__(self, "levels", lv)

    @property
    def s(self):
        return self.levels.size - 1

    @property
    def bits(self):
        return max(1, math.ceil(math.log2(self.levels.size)))

    @property
    def alpha(self):
        return float(self.levels[-1])

    @property
    def steps(self):
        return np.diff(self.levels)


def truncate(values, alpha):
    """Clip to ``[-alpha, alpha]``; ``alpha = inf`` is the identity."""
    if not alpha > 0:
        raise InvalidAlpha(f"alpha must be > 0, got {alpha}")
    v = np.asarray(values, dtype=np.float64)
    if math.isinf(alpha):
        return v.copy()
    return np.clip(v, -alpha, alpha)


def _uniform_levels(alpha, s):
    lv = -alpha + 2.0 * alpha * np.arange(s + 1) / s
    lv[-1] = alpha
    return lv


def _cuberoot_levels(alpha, s, hist):
    edges = getattr(hist, "edges", None)
    if edges is None:
        # analytic densities: piecewise-linear inversion on a fine grid
        edges = np.linspace(-alpha, alpha, 4097)
    inner = edges[(edges > -alpha) & (edges < alpha)]
    xs = np.concatenate(([-alpha], inner, [alpha]))
    cs = hist.cbrt_integral(-alpha, xs)
    total = cs[-1]
    if not total > 0:
        raise SupportMismatch(f"density has no mass inside [-{alpha}, {alpha}]")
    targets = total * np.arange(1, s) / s
    j = np.searchsorted(cs, targets, side="left")
    x0, x1 = xs[j - 1], xs[j]
    c0, c1 = cs[j - 1], cs[j]
    interior = x0 + (targets - c0) / (c1 - c0) * (x1 - x0)
    lv = np.concatenate(([-alpha], interior, [alpha]))
    if getattr(hist, "symmetric", False):
        lv = 0.5 * (lv - lv[::-1])
    return lv


def _biscaled_levels(alpha, k, s_alpha, s_beta):
    if s_alpha % 2:
        raise OddSplit(f"s_alpha={s_alpha} cannot be split evenly across both outer regions")
    beta = k * alpha
    half = s_alpha // 2
    left = np.linspace(-alpha, -beta, half + 1)
    mid = np.linspace(-beta, beta, s_beta + 1)
    right = np.linspace(beta, alpha, half + 1)
    return np.concatenate((left[:-1], mid, right[1:]))


def build_codebook(spec):
    if spec.variant == UNIFORM:
        lv = _uniform_levels(spec.alpha, spec.s)
    elif spec.variant == CUBEROOT:
        lv = _cuberoot_levels(spec.alpha, spec.s, spec.histogram)
    else:
        lv = _biscaled_levels(spec.alpha, spec.k, spec.s_alpha, spec.s_beta)
    return Codebook(lv)


def stochastic_quantize(values, codebook, rng_seed):
    """Unbiased stochastic rounding to codebook indices (one uniform per element)."""
    g = np.asarray(values, dtype=np.float64)
    lv = codebook.levels
    if g.size and not (np.all(g >= lv[0]) and np.all(g <= lv[-1])):
        raise OutOfRange(f"values must lie in [{lv[0]}, {lv[-1]}]; truncate first")
    rng = make_rng(rng_seed)
    k = np.clip(np.searchsorted(lv, g, side="right"), 1, codebook.s)
    lo = lv[k - 1]
    p = (g - lo) / (lv[k] - lo)
    up = rng.random(g.shape) < p
    return (k - 1 + up).astype(np.int64)


def dequantize(indices, codebook):
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() > codebook.s):
        raise IndexOutOfRange(f"indices must lie in [0, {codebook.s}]")
    return codebook.levels[idx]


def mse_bound(codebook, density):
    """Lemma-style MSE estimates ``(sum P_k D_k^2 / 4, sum P_k D_k^2 / 6)``.

    ``P_k`` is the density mass on interval k.  Mass outside the codebook
    range is treated as truncated onto the end levels, where it quantizes
    exactly and contributes nothing.
    """
    lv = codebook.levels
    p = np.asarray(density.mass_between(lv[:-1], lv[1:]), dtype=np.float64)
    if not p.sum() > 0:
        raise SupportMismatch("density puts no mass on the codebook range")
    d2 = np.diff(lv) ** 2
    return float(np.sum(p * d2) / 4.0), float(np.sum(p * d2) / 6.0)


def empirical_mse(original, reconstructed):
    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(reconstructed, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.mean((a - b) ** 2))
