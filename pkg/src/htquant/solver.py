"""Optimal truncation threshold and error/convergence-bound calculators.

The threshold is the fixed point of::

    alpha = g_min * (2 rho s^2 / ((gamma - 2) Q(alpha))) ** (1 / (gamma - 1))

where ``Q`` is the in-range functional of the chosen quantizer (``Q_U`` for
uniform, ``Q_N`` for cube-root non-uniform, ``Q_B`` for bi-scaled).  ``Q``
may be evaluated on a measured histogram (``empirical``), on the fitted
body-plus-tail model (``model``), or pinned to 1 (``unit``).
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    AlphaBelowGmin,
    BudgetTooSmall,
    GammaOutOfRange,
    InputError,
    InvalidEta,
    InvalidK,
    NoConvergence,
)
from .tail import BodyTailDensity

log = logging.getLogger(__name__)

UNIFORM = "uniform"
NONUNIFORM = "nonuniform"
BISCALED = "biscaled"
SCHEMES = (UNIFORM, NONUNIFORM, BISCALED)

Q_MODES = ("empirical", "model", "unit")
K_MODES = ("one-step", "alternate")

K_GRID = np.round(np.arange(1, 100) / 100.0, 2)
GAMMA_REJECT = 3.001
TOL = 1e-6
MAX_ITER = 100


@dataclass(frozen=True)
class ProblemSpec:
    N: int
    B: int
    d: int
    sigma2: float
    nu: float
    eta: float
    T: int
    F_gap: float

    def __post_init__(self):
        for name in ("N", "B", "d", "nu", "eta", "T", "F_gap"):
            if not getattr(self, name) > 0:
                raise InputError(f"ProblemSpec.{name} must be positive")
        # sigma2 = 0 is the noiseless limit used by the gradient-descent sanity runs
        if not self.sigma2 >= 0:
            raise InputError("ProblemSpec.sigma2 must be non-negative")


@dataclass
class ErrorBreakdown:
    quant_variance: float
    trunc_bias: float
    e_tq: float
    e_dsgd: float = 0.0
    total_bound: float = 0.0
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d.update(d.pop("extras"))
        return d


@dataclass
class SolverResult:
    scheme: str
    alpha: float
    iterations: int
    converged: bool
    q_value: float
    k: Optional[float] = None
    s_alpha: Optional[int] = None
    s_beta: Optional[int] = None
    floored: bool = False

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


def check_gamma(tail):
    if tail.gamma <= GAMMA_REJECT:
        raise GammaOutOfRange(
            f"gamma={tail.gamma} <= {GAMMA_REJECT}: truncation bias diverges"
        )


def q_u(alpha, density):
    """Mass of the density inside ``[-alpha, alpha]``."""
    return density.mass_between(-alpha, alpha)


def q_n(alpha, density):
    """``[ integral_{-alpha}^{alpha} p^(1/3) (2 alpha)^(-2/3) dg ]^3``."""
    return density.cbrt_integral(-alpha, alpha) ** 3 / (4.0 * alpha * alpha)


def q_b(alpha, k, density):
    k = np.asarray(k, dtype=np.float64)
    if np.any(k <= 0) or np.any(k >= 1):
        raise InvalidK(f"k must lie in (0, 1), got {k}")
    outer = 2.0 * np.clip(density.mass_between(k * alpha, alpha), 0.0, None)
    inner = 2.0 * np.clip(density.mass_between(0.0, k * alpha), 0.0, None)
    out = (np.cbrt(outer) * (1 - k) ** (2 / 3) + np.cbrt(inner) * k ** (2 / 3)) ** 3
    return out if out.ndim else float(out)


def best_k(alpha, density, grid=K_GRID):
    """Grid minimiser of ``Q_B(alpha, k)``; ties resolve to the smallest k."""
    vals = q_b(alpha, grid, density)
    i = int(np.argmin(vals))
    return float(grid[i]), float(vals[i])


def region_densities(alpha, k, density):
    """Average one-sided densities on ``[0, k alpha]`` and ``[k alpha, alpha]``."""
    beta = k * alpha
    p1 = float(density.mass_between(0.0, beta)) / beta
    p2 = float(density.mass_between(beta, alpha)) / (alpha - beta)
    return max(p1, 0.0), max(p2, 0.0)


def biscaled_split_real(s, k, p1, p2):
    """Real-valued ``(s_alpha, s_beta)`` minimising the bi-scaled variance."""
    if not 0 < k < 1:
        raise InvalidK(f"k must lie in (0, 1), got {k}")
    a = np.cbrt(p2) * (1 - k)
    c = np.cbrt(p1) * k
    if a + c == 0:
        raise InputError("both regions carry zero density")
    return float(a / (a + c) * s), float(c / (a + c) * s)


def split_levels_biscaled(s, k, density, alpha):
    """Integer split with ``s_alpha`` even, ``s_beta >= 1`` and ``s_alpha + s_beta = s``."""
    if s < 3:
        raise BudgetTooSmall(f"biscaled quantizer needs s >= 3, got {s}")
    p1, p2 = region_densities(alpha, k, density)
    sa, _ = biscaled_split_real(s, k, p1, p2)
    hi = (s - 1) - ((s - 1) % 2)
    s_alpha = int(min(max(2 * round(sa / 2), 2), hi))
    return s_alpha, s - s_alpha


def _density_for(q_mode, tail, density):
    if q_mode not in Q_MODES:
        raise InputError(f"unknown Q mode {q_mode!r}")
    if q_mode == "empirical":
        if density is None:
            raise InputError("empirical Q mode needs a density")
        return density
    if q_mode == "model":
        return BodyTailDensity(tail)
    return None


def q_value(scheme, alpha, density, k=None):
    """The scheme's Q functional; ``density=None`` means Q = 1."""
    if density is None:
        return 1.0
    if scheme == UNIFORM:
        return float(q_u(alpha, density))
    if scheme == NONUNIFORM:
        return float(q_n(alpha, density))
    if scheme == BISCALED:
        if k is None:
            return best_k(alpha, density)[1]
        return float(q_b(alpha, k, density))
    raise InputError(f"unknown scheme {scheme!r}")


def alpha_map(tail, s, q):
    return tail.g_min * (2 * tail.rho * s * s / ((tail.gamma - 2) * q)) ** (1 / (tail.gamma - 1))


def solve_alpha(
    scheme,
    tail,
    s,
    density=None,
    q_mode="empirical",
    k_mode="one-step",
    tol=TOL,
    max_iter=MAX_ITER,
    strict=False,
    floor_at_gmin=False,
):
    """Fixed-point iteration for the truncation threshold.

    Starts from ``Q = 1``; halves the step whenever successive steps change
    sign.  For the bi-scaled scheme ``k`` is chosen by grid search, once at
    the starting point (``one-step``) or at every iterate (``alternate``).
    Returns the last iterate with ``converged=False`` after ``max_iter``
    steps, or raises :class:`NoConvergence` when ``strict``.  With
    ``floor_at_gmin`` a fixed point at or below ``g_min`` is lifted to just
    above it (``floored=True``) instead of raising.
    """
    if scheme not in SCHEMES:
        raise InputError(f"unknown scheme {scheme!r}")
    if k_mode not in K_MODES:
        raise InputError(f"unknown k mode {k_mode!r}")
    check_gamma(tail)
    if s < 1:
        raise InputError(f"s must be >= 1, got {s}")
    if tail.rho <= 0:
        raise AlphaBelowGmin("rho = 0: no tail mass, the fixed point collapses to 0")
    dens = _density_for(q_mode, tail, density)

    alpha = alpha_map(tail, s, 1.0)
    k = None
    if scheme == BISCALED and dens is not None:
        k = best_k(alpha, dens)[0]

    def step(a, k):
        if scheme == BISCALED and dens is not None and k_mode == "alternate":
            k = best_k(a, dens)[0]
        q = q_value(scheme, a, dens, k)
        if not q > 0:
            raise AlphaBelowGmin(f"Q({a:.6g}) = 0: density has no mass in range")
        return alpha_map(tail, s, q), k

    prev = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        target, k = step(alpha, k)
        delta = target - alpha
        if prev is not None and delta * prev < 0:
            delta *= 0.5
        new = alpha + delta
        rel = abs(new - alpha) / alpha
        alpha, prev = new, delta
        if rel < tol:
            converged = True
            break

    floored = False
    if alpha <= tail.g_min:
        if not floor_at_gmin:
            raise AlphaBelowGmin(
                f"fixed point alpha={alpha:.6g} <= g_min={tail.g_min:.6g}; tail model invalid for s={s}"
            )
        log.debug("alpha %.6g floored at g_min %.6g", alpha, tail.g_min)
        alpha = tail.g_min * (1 + 1e-6)
        floored = True
        if scheme == BISCALED and dens is not None:
            k = best_k(alpha, dens)[0]
    if scheme == BISCALED and dens is None:
        k = 0.5
    q = q_value(scheme, alpha, dens, k)
    res = SolverResult(scheme, float(alpha), it, converged, float(q), floored=floored)
    if scheme == BISCALED:
        res.k = k
        split_dens = dens if dens is not None else BodyTailDensity(tail)
        res.s_alpha, res.s_beta = split_levels_biscaled(s, k, split_dens, alpha)
    if not converged:
        log.warning("alpha iteration did not converge after %d steps", max_iter)
        if strict:
            raise NoConvergence(f"no convergence after {max_iter} iterations", res)
    return res


def truncation_bias(tail, alpha, d=1, N=1):
    """Closed form of ``(2d/N) * integral_alpha^inf (g - alpha)^2 p(g) dg`` for the power-law tail."""
    check_gamma(tail)
    g = tail.gamma
    return 4 * d * tail.rho * tail.g_min ** (g - 1) * alpha ** (3 - g) / (N * (g - 2) * (g - 3))


def error_tq(
    scheme,
    tail,
    alpha,
    s,
    d=1,
    N=1,
    density=None,
    q_mode="empirical",
    k=None,
    s_alpha=None,
    s_beta=None,
):
    """Quantization variance plus truncation bias at a given threshold."""
    check_gamma(tail)
    dens = _density_for(q_mode, tail, density)
    if scheme in (UNIFORM, NONUNIFORM):
        q = q_value(scheme, alpha, dens)
        qv = d * q * alpha ** 2 / (N * s ** 2)
    elif scheme == BISCALED:
        if k is None or s_alpha is None or s_beta is None:
            raise InputError("biscaled error needs k, s_alpha and s_beta")
        if s_alpha + s_beta != s:
            raise InputError(f"split {s_alpha}+{s_beta} != s={s}")
        src = dens if dens is not None else BodyTailDensity(tail)
        p1, p2 = region_densities(alpha, k, src)
        beta = k * alpha
        qv = 2 * d * p1 * beta ** 3 / (N * s_beta ** 2) + 2 * d * p2 * (alpha - beta) ** 3 / (N * s_alpha ** 2)
    else:
        raise InputError(f"unknown scheme {scheme!r}")
    tb = truncation_bias(tail, alpha, d, N)
    return ErrorBreakdown(quant_variance=float(qv), trunc_bias=float(tb), e_tq=float(qv + tb), total_bound=float(qv + tb))


def e_tq_curve(scheme, tail, alphas, s, density, d=1, N=1):
    """``E_TQ`` on an array of thresholds with ``Q`` re-evaluated at each one.

    For the bi-scaled scheme, ``Q_B`` is minimised over the k grid at every
    threshold (the real-valued split makes the variance ``Q_B alpha^2 / s^2``).
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    if density is None:
        q = np.ones_like(alphas)
    elif scheme == UNIFORM:
        q = q_u(alphas, density)
    elif scheme == NONUNIFORM:
        q = q_n(alphas, density)
    else:
        q = np.min(q_b(alphas[:, None], K_GRID[None, :], density), axis=1)
    return d * q * alphas ** 2 / (N * s ** 2) + truncation_bias(tail, alphas, d, N)


def _bound_base(tail, s, d, N):
    g = tail.gamma
    return (
        d
        * tail.g_min ** 2
        * (2 * tail.rho) ** (2 / (g - 1))
        * s ** ((6 - 2 * g) / (g - 1))
        / (N * (g - 3) * (g - 2) ** (2 / (g - 1)))
    )


def quant_term(tail, q, s, d=1, N=1):
    """Closed-form quantization term of the convergence bound at the optimal threshold."""
    check_gamma(tail)
    g = tail.gamma
    return (g - 1) * q ** ((g - 3) / (g - 1)) * _bound_base(tail, s, d, N)


def quant_term_unit_alpha(tail, q_prime, s, d=1, N=1):
    """Variant using ``alpha' = g_min (2 rho s^2/(gamma-2))^(1/(gamma-1))`` (Q taken as 1)."""
    check_gamma(tail)
    return ((tail.gamma - 3) * q_prime + 2) * _bound_base(tail, s, d, N)


def e_dsgd(problem):
    return 2 * problem.F_gap / (problem.T * problem.eta) + problem.sigma2 / (problem.N * problem.B)


def convergence_bound(
    problem, scheme, tail, s, density=None, q_mode="empirical", k_mode="one-step", floor_at_gmin=False
):
    """Upper bound on the average squared gradient norm.

    ``total_bound = e_dsgd + quant_term``; ``e_tq`` is the Lemma-form error
    evaluated at the solved threshold.  For the uniform scheme the extras
    also hold the ``Q_U(alpha') ~ 1`` variant and its coefficient gap.
    """
    if problem.eta > 1.0 / problem.nu:
        raise InvalidEta(f"eta={problem.eta} exceeds 1/nu={1.0 / problem.nu}")
    res = solve_alpha(scheme, tail, s, density, q_mode=q_mode, k_mode=k_mode, floor_at_gmin=floor_at_gmin)
    eb = error_tq(
        scheme, tail, res.alpha, s, problem.d, problem.N, density, q_mode,
        k=res.k, s_alpha=res.s_alpha, s_beta=res.s_beta,
    )
    eb.e_dsgd = e_dsgd(problem)
    qt = quant_term(tail, res.q_value, s, problem.d, problem.N)
    eb.total_bound = eb.e_dsgd + qt
    eb.extras = {"scheme": scheme, "s": s, "alpha": res.alpha, "q_value": res.q_value, "quant_term": qt}
    if res.floored:
        eb.extras["alpha_floored"] = True
    if res.k is not None:
        eb.extras.update(k=res.k, s_alpha=res.s_alpha, s_beta=res.s_beta)
    if scheme == UNIFORM:
        dens = _density_for(q_mode, tail, density)
        a_prime = alpha_map(tail, s, 1.0)
        qp = q_value(UNIFORM, a_prime, dens)
        vt = quant_term_unit_alpha(tail, qp, s, problem.d, problem.N)
        g = tail.gamma
        coef_thm = (g - 1) * res.q_value ** ((g - 3) / (g - 1))
        coef_var = (g - 3) * qp + 2
        eb.extras.update(
            alpha_prime=a_prime,
            variant_bound=eb.e_dsgd + vt,
            epsilon=coef_var - coef_thm,
            epsilon_bound=2 * (1 - qp),
        )
    return eb
