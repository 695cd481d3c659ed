"""Power-law tail model and empirical gradient densities.

The gradient-element density is modelled as symmetric about zero with a
power-law tail beyond ``g_min``::

    p(g) = rho * (gamma - 1) * g_min**(gamma - 1) * |g|**(-gamma),   |g| > g_min

where ``rho`` is the one-sided tail mass.  Two density containers share a
small duck-typed interface (``cdf``, ``mass``, ``cbrt_integral``) so the
solver functionals can run on either measured histograms or the fitted model.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateSamples,
    InputError,
    InvalidGmin,
    InvalidTail,
    NoTailSamples,
    OutOfSupport,
)

log = logging.getLogger(__name__)

GAMMA_MIN = 3.0
GAMMA_MAX = 5.0
# fitted gamma is clamped into [GAMMA_FLOOR, GAMMA_MAX]; the solver rejects <= 3.001
GAMMA_FLOOR = 3.01
DEFAULT_QUANTILE = 0.90
DEFAULT_BINS = 1024


@dataclass(frozen=True)
class PowerLawTail:
    gamma: float
    g_min: float
    rho: float
    n_tail: int = 0
    clamped: bool = False

    def __post_init__(self):
        if not (GAMMA_MIN < self.gamma <= GAMMA_MAX):
            raise InvalidTail(f"gamma={self.gamma} outside (3, 5]")
        if not self.g_min > 0:
            raise InvalidTail(f"g_min={self.g_min} must be positive")
        if not (0.0 <= self.rho <= 0.5):
            raise InvalidTail(f"rho={self.rho} outside [0, 0.5]")

    def to_dict(self):
        return {
            "gamma": float(self.gamma),
            "g_min": float(self.g_min),
            "rho": float(self.rho),
            "n_tail": int(self.n_tail),
            "gamma_clamped": bool(self.clamped),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                gamma=float(d["gamma"]),
                g_min=float(d["g_min"]),
                rho=float(d["rho"]),
                n_tail=int(d.get("n_tail", 0)),
                clamped=bool(d.get("gamma_clamped", False)),
            )
        except KeyError as exc:
            raise InputError(f"tail JSON missing field {exc}") from None

    def tail_mass_beyond(self, x):
        """One-sided mass of the model beyond ``x >= g_min``."""
        return self.rho * (self.g_min / x) ** (self.gamma - 1)


@dataclass
class GradientSample:
    values: np.ndarray
    group_id: str = "all"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.values)):
            raise InputError("gradient sample contains NaN or Inf")

    def __len__(self):
        return self.values.size


def _abs_values(samples):
    if isinstance(samples, GradientSample):
        return np.abs(samples.values)
    arr = np.asarray(samples, dtype=np.float64).ravel()
    if not np.all(np.isfinite(arr)):
        raise InputError("gradient sample contains NaN or Inf")
    return np.abs(arr)


def fit_gamma_mle(samples, g_min):
    """Maximum-likelihood tail index from the values with ``|g| > g_min``.

    ``gamma = 1 + n / sum(log(|g_j| / g_min))``.  The result is not clamped.
    """
    if not g_min > 0:
        raise InvalidGmin(f"g_min must be > 0, got {g_min}")
    a = _abs_values(samples)
    tail = a[a > g_min]
    if tail.size == 0:
        raise NoTailSamples(f"no samples exceed g_min={g_min}")
    s = np.sum(np.log(tail / g_min))
    return 1.0 + tail.size / s


def select_gmin(samples, quantile=DEFAULT_QUANTILE):
    """Nearest-rank quantile of ``|values|``."""
    if not 0.0 < quantile < 1.0:
        raise InputError(f"quantile must be in (0, 1), got {quantile}")
    a = _abs_values(samples)
    if a.size == 0:
        raise DegenerateSamples("empty sample")
    rank = max(1, math.ceil(quantile * a.size))
    g = float(np.partition(a, rank - 1)[rank - 1])
    if g <= 0:
        raise DegenerateSamples(f"|values| quantile {quantile} is zero")
    return g


def estimate_rho(samples, g_min):
    if not g_min > 0:
        raise InvalidGmin(f"g_min must be > 0, got {g_min}")
    a = _abs_values(samples)
    if a.size == 0:
        return 0.0
    return float(np.count_nonzero(a > g_min)) / (2.0 * a.size)


def fit_tail(samples, quantile=DEFAULT_QUANTILE, g_min=None):
    """Fit (gamma, g_min, rho), clamping gamma into the supported regime.

    A gamma outside ``[GAMMA_FLOOR, 5]`` is clamped and the result's
    ``clamped`` flag is set.
    """
    if g_min is None:
        g_min = select_gmin(samples, quantile)
    raw = fit_gamma_mle(samples, g_min)
    rho = estimate_rho(samples, g_min)
    a = _abs_values(samples)
    n_tail = int(np.count_nonzero(a > g_min))
    gamma = min(max(raw, GAMMA_FLOOR), GAMMA_MAX)
    clamped = gamma != raw
    if clamped:
        log.warning("fitted gamma %.4f clamped to %.4f", raw, gamma)
    return PowerLawTail(gamma=gamma, g_min=float(g_min), rho=rho, n_tail=n_tail, clamped=clamped)


def powerlaw_pdf(g, tail):
    g = np.asarray(g, dtype=np.float64)
    ag = np.abs(g)
    if np.any(ag <= tail.g_min):
        raise OutOfSupport(f"|g| must exceed g_min={tail.g_min}")
    out = tail.rho * (tail.gamma - 1) * tail.g_min ** (tail.gamma - 1) * ag ** (-tail.gamma)
    return out if out.ndim else float(out)


def sample_powerlaw(n, gamma, g_min, rng, symmetric=True):
    """Inverse-CDF draws ``g_min * u**(-1/(gamma-1))`` with optional random sign."""
    u = 1.0 - rng.random(n)  # (0, 1]
    g = g_min * u ** (-1.0 / (gamma - 1.0))
    if symmetric:
        g = np.where(rng.random(n) < 0.5, -g, g)
    return g


@dataclass
class DensityHistogram:
    """Piecewise-constant density: ``mass[j]`` spread uniformly over bin j."""

    edges: np.ndarray
    mass: np.ndarray
    symmetric: bool = False
    _cum: np.ndarray = field(init=False, repr=False)
    _cbrt_cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.mass = np.asarray(self.mass, dtype=np.float64)
        if self.edges.ndim != 1 or self.edges.size != self.mass.size + 1:
            raise InputError("edges must have len(mass) + 1 entries")
        if np.any(np.diff(self.edges) <= 0):
            raise InputError("edges must be strictly increasing")
        if np.any(self.mass < 0):
            raise InputError("negative bin mass")
        total = self.mass.sum()
        if abs(total - 1.0) > 1e-9:
            raise InputError(f"bin masses sum to {total}, expected 1")
        self._cum = np.concatenate(([0.0], np.cumsum(self.mass)))
        w = np.diff(self.edges)
        self._cbrt_cum = np.concatenate(([0.0], np.cumsum(np.cbrt(self.mass / w) * w)))

    @property
    def widths(self):
        return np.diff(self.edges)

    @property
    def pdf_values(self):
        return self.mass / self.widths

    def cdf(self, x):
        return np.interp(x, self.edges, self._cum)

    def mass_between(self, a, b):
        return self.cdf(b) - self.cdf(a)

    def cbrt_integral(self, a, b):
        """Integral of ``p(g)**(1/3)`` over ``[a, b]``."""
        return np.interp(b, self.edges, self._cbrt_cum) - np.interp(a, self.edges, self._cbrt_cum)

    def sample(self, n, rng):
        j = rng.choice(self.mass.size, size=n, p=self.mass)
        return self.edges[j] + rng.random(n) * self.widths[j]

    @classmethod
    def from_cdf(cls, edges, cdf, symmetric=False):
        """Bin an analytic distribution; mass outside ``edges`` is dropped and the rest renormalised."""
        edges = np.asarray(edges, dtype=np.float64)
        m = np.diff(cdf(edges))
        m = np.clip(m, 0.0, None)
        return cls(edges, m / m.sum(), symmetric)

    @classmethod
    def uniform(cls, lo, hi, bins=DEFAULT_BINS):
        return cls(np.linspace(lo, hi, bins + 1), np.full(bins, 1.0 / bins), symmetric=(lo == -hi))


def empirical_density(samples, bins=DEFAULT_BINS, symmetrize=True):
    """Equal-width histogram over ``[-max|g|, max|g|]``.

    With ``symmetrize`` the mass is averaged with its mirror image, so bin j
    and bin ``bins-1-j`` carry identical mass.
    """
    if bins < 2:
        raise InputError("bins must be >= 2")
    if isinstance(samples, GradientSample):
        v = samples.values
    else:
        v = np.asarray(samples, dtype=np.float64).ravel()
    if v.size == 0:
        raise InputError("empty sample")
    m = float(np.max(np.abs(v)))
    if m == 0.0:
        m = 1.0
    edges = np.linspace(-m, m, bins + 1)
    counts, _ = np.histogram(v, bins=edges)
    mass = counts / v.size
    if symmetrize:
        mass = 0.5 * (mass + mass[::-1])
    return DensityHistogram(edges, mass, symmetric=symmetrize)


class BodyTailDensity:
    """Symmetric model density: uniform body on ``[-g_min, g_min]`` plus power-law tails.

    The body carries mass ``1 - 2*rho``; each tail carries ``rho``.
    """

    symmetric = True

    def __init__(self, tail):
        self.tail = tail
        self._body = (1.0 - 2.0 * tail.rho) / (2.0 * tail.g_min)

    def pdf(self, g):
        t = self.tail
        ag = np.abs(np.asarray(g, dtype=np.float64))
        with np.errstate(divide="ignore"):
            tailpart = t.rho * (t.gamma - 1) * t.g_min ** (t.gamma - 1) * np.maximum(ag, t.g_min) ** (-t.gamma)
        return np.where(ag <= t.g_min, self._body, tailpart)

    def _half_cdf(self, x):
        # mass in [0, x] for x >= 0
        t = self.tail
        x = np.asarray(x, dtype=np.float64)
        xb = np.minimum(x, t.g_min)
        beyond = np.where(x > t.g_min, t.rho * (1.0 - (t.g_min / np.maximum(x, t.g_min)) ** (t.gamma - 1)), 0.0)
        return self._body * xb + beyond

    def cdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        out = 0.5 + np.sign(x) * self._half_cdf(np.abs(x))
        return out if out.ndim else float(out)

    def mass_between(self, a, b):
        return self.cdf(b) - self.cdf(a)

    def _half_cbrt(self, x):
        t = self.tail
        x = np.asarray(x, dtype=np.float64)
        xb = np.minimum(x, t.g_min)
        c = (t.rho * (t.gamma - 1) * t.g_min ** (t.gamma - 1)) ** (1.0 / 3.0)
        e = 1.0 - t.gamma / 3.0
        xt = np.maximum(x, t.g_min)
        beyond = c * (xt ** e - t.g_min ** e) / e
        return np.cbrt(self._body) * xb + beyond

    def cbrt_integral(self, a, b):
        def s(x):
            x = np.asarray(x, dtype=np.float64)
            return np.sign(x) * self._half_cbrt(np.abs(x))

        out = s(b) - s(a)
        return out if np.ndim(out) else float(out)

    def sample(self, n, rng):
        t = self.tail
        in_tail = rng.random(n) < 2.0 * t.rho
        body = rng.uniform(-t.g_min, t.g_min, n)
        tl = sample_powerlaw(n, t.gamma, t.g_min, rng)
        return np.where(in_tail, tl, body)

    def histogram(self, hi, bins=DEFAULT_BINS):
        return DensityHistogram.from_cdf(np.linspace(-hi, hi, bins + 1), self.cdf, symmetric=True)


class HybridDensity(BodyTailDensity):
    """Empirical body on ``[-g_min, g_min]`` joined to the fitted power-law tails.

    A plain histogram of one round's gradients has no mass past the largest
    sample, so Q functionals built on it vanish as alpha grows and cube-root
    codebooks leave wide gaps there.  Here the histogram only shapes the body
    (rescaled to mass ``1 - 2*rho``); beyond ``g_min`` the fitted tail takes over.
    """

    def __init__(self, hist, tail):
        super().__init__(tail)
        self.hist = hist
        inside = float(hist.mass_between(-tail.g_min, tail.g_min))
        if not inside > 0:
            raise DegenerateSamples("histogram carries no mass inside [-g_min, g_min]")
        self._scale = (1.0 - 2.0 * tail.rho) / inside

    def pdf(self, g):
        h = self.hist
        g = np.asarray(g, dtype=np.float64)
        idx = np.clip(np.searchsorted(h.edges, g, side="right") - 1, 0, h.mass.size - 1)
        body = self._scale * h.pdf_values[idx]
        return np.where(np.abs(g) <= self.tail.g_min, body, super().pdf(g))

    def _body_cdf(self, x):
        # body mass in [0, x] for 0 <= x <= g_min
        return self._scale * (self.hist.cdf(x) - self.hist.cdf(0.0))

    def _half_cdf(self, x):
        t = self.tail
        x = np.asarray(x, dtype=np.float64)
        xb = np.minimum(x, t.g_min)
        beyond = np.where(x > t.g_min, t.rho * (1.0 - (t.g_min / np.maximum(x, t.g_min)) ** (t.gamma - 1)), 0.0)
        return self._body_cdf(xb) + beyond

    def _half_cbrt(self, x):
        t = self.tail
        x = np.asarray(x, dtype=np.float64)
        xb = np.minimum(x, t.g_min)
        body = np.cbrt(self._scale) * np.asarray(self.hist.cbrt_integral(0.0, xb), dtype=np.float64)
        c = (t.rho * (t.gamma - 1) * t.g_min ** (t.gamma - 1)) ** (1.0 / 3.0)
        e = 1.0 - t.gamma / 3.0
        xt = np.maximum(x, t.g_min)
        return body + c * (xt ** e - t.g_min ** e) / e

    def sample(self, n, rng):
        t = self.tail
        in_tail = rng.random(n) < 2.0 * t.rho
        body = self.hist.sample(n, rng)
        # resample body draws that fell outside the body range
        bad = np.abs(body) > t.g_min
        while np.any(bad):
            body[bad] = self.hist.sample(int(bad.sum()), rng)
            bad = np.abs(body) > t.g_min
        return np.where(in_tail, sample_powerlaw(n, t.gamma, t.g_min, rng), body)


def read_gradient_dump(path):
    """Load a gradient dump: raw little-endian float32, or a one-column CSV."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    try:
        if path.suffix.lower() == ".csv":
            vals = np.loadtxt(path, delimiter=",", ndmin=1, dtype=np.float64)
            if vals.ndim != 1:
                raise InputError(f"{path}: expected one column")
        else:
            raw = path.read_bytes()
            if len(raw) % 4:
                raise InputError(f"{path}: size {len(raw)} is not a multiple of 4")
            vals = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    return GradientSample(vals, group_id=path.stem)


def write_f32(path, values):
    np.asarray(values, dtype="<f4").tofile(path)
