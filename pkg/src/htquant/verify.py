"""Oracle suites behind ``htquant verify`` and the acceptance driver.

Each suite returns a list of :class:`Check` records; a suite passes when
every check passes.  Tolerances are fixed here, not configurable, so a
report is comparable across runs.
"""

import logging
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import integrate, stats

from . import codec, solver
from .errors import AlphaBelowGmin
from .quantizer import (
    BISCALED,
    CUBEROOT,
    UNIFORM,
    DensitySpec,
    build_codebook,
    dequantize,
    make_rng,
    mse_bound,
    stochastic_quantize,
)
from .tail import BodyTailDensity, DensityHistogram, PowerLawTail, powerlaw_pdf

log = logging.getLogger(__name__)

GAMMAS = (3.5, 4.0, 4.5, 5.0)
RHOS = (0.05, 0.1, 0.3)
LEVELS = (3, 7, 15)
SLOPE_S = (7, 15, 31, 63, 127)


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    detail: str = ""

    def line(self):
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.suite}: {self.name} {self.detail}".rstrip()


def lattice():
    for g in GAMMAS:
        for rho in RHOS:
            for s in LEVELS:
                yield g, rho, s


def _smooth_densities(alpha=1.0, bins=1024):
    edges = np.linspace(-alpha, alpha, bins + 1)
    tri = stats.triang(c=0.5, loc=-alpha, scale=2 * alpha).cdf
    gauss = stats.norm(scale=0.4 * alpha).cdf
    return {
        "uniform": DensityHistogram.uniform(-alpha, alpha, bins),
        "triangular": DensityHistogram.from_cdf(edges, tri, symmetric=True),
        "gaussian": DensityHistogram.from_cdf(edges, gauss, symmetric=True),
    }


def _heavy_density(alpha=1.0, bins=1024):
    return BodyTailDensity(PowerLawTail(4.0, 0.25 * alpha, 0.1)).histogram(alpha, bins)


def standard_codebooks(alpha=1.0, s=7):
    """The three codebooks used by the unbiasedness check."""
    h = _heavy_density(alpha)
    return {
        "uniform": build_codebook(DensitySpec(UNIFORM, alpha, s)),
        "cuberoot": build_codebook(DensitySpec(CUBEROOT, alpha, s, histogram=h)),
        "biscaled": build_codebook(DensitySpec(BISCALED, alpha, s, k=0.4, s_alpha=2, s_beta=s - 2)),
    }


def suite_unbiased(seed=0, trials=10 ** 6, probes=20):
    out = []
    rng = np.random.default_rng(seed)
    pts = np.concatenate(([-1.0, 0.0], rng.uniform(-1, 1, probes - 2)))
    for ci, (name, cb) in enumerate(standard_codebooks().items()):
        worst = 0.0
        fails = 0
        for j, g in enumerate(pts):
            idx = stochastic_quantize(np.full(trials, g), cb, (seed, ci, j))
            v = dequantize(idx, cb)
            se = v.std(ddof=1) / math.sqrt(trials)
            err = abs(v.mean() - g)
            z = err / se if se > 0 else (0.0 if err == 0 else math.inf)
            worst = max(worst, z)
            fails += not (err <= 4 * se)
        out.append(Check("unbiased", f"{name} s=7", fails == 0, f"probes={probes} worst_z={worst:.2f} limit=4"))
    return out


def suite_lemma1(seed=0, n=10 ** 6):
    """Monte Carlo MSE against the quarter bound and the high-rate estimate."""
    out = []
    dens = dict(_smooth_densities())
    dens["heavy"] = _heavy_density()
    rng = make_rng(seed)
    for name, h in dens.items():
        x = h.sample(n, rng)
        for s in LEVELS:
            specs = {"uniform": DensitySpec(UNIFORM, 1.0, s)}
            if name == "heavy":
                specs = {"cuberoot": DensitySpec(CUBEROOT, 1.0, s, histogram=h)}
            for cname, spec in specs.items():
                cb = build_codebook(spec)
                sq = (dequantize(stochastic_quantize(x, cb, rng), cb) - x) ** 2
                mse = sq.mean()
                se = sq.std(ddof=1) / math.sqrt(n)
                quarter, _ = mse_bound(cb, h)
                ok = mse - 3 * se <= quarter
                out.append(Check("lemma1", f"{name}/{cname} s={s} bound", ok, f"mse={mse:.4e} bound={quarter:.4e}"))
    for name, h in _smooth_densities().items():
        x = h.sample(n, rng)
        for s in (63, 127, 255):
            cb = build_codebook(DensitySpec(UNIFORM, 1.0, s))
            mse = float(np.mean((dequantize(stochastic_quantize(x, cb, rng), cb) - x) ** 2))
            _, sixth = mse_bound(cb, h)
            rel = abs(mse - sixth) / mse
            out.append(Check("lemma1", f"{name} s={s} high-rate", rel <= 0.05, f"rel={rel:.4f} limit=0.05"))
    return out


def bias_quadrature(tail, alpha):
    f = lambda g: (g - alpha) ** 2 * powerlaw_pdf(g, tail)
    val, _ = integrate.quad(f, alpha, np.inf, epsabs=0, epsrel=1e-12, limit=200)
    return 2 * val


BIAS_CASES = ((0.1, 0.01, 0.02), (0.3, 1.0, 1.5), (0.05, 0.5, 3.0))


def suite_bias():
    out = []
    for g in GAMMAS:
        for rho, g_min, alpha in BIAS_CASES:
            tail = PowerLawTail(g, g_min, rho)
            ref = bias_quadrature(tail, alpha)
            got = solver.truncation_bias(tail, alpha)
            rel = abs(got - ref) / ref
            out.append(Check("bias", f"gamma={g} rho={rho} g_min={g_min} alpha={alpha}", rel <= 1e-6, f"rel={rel:.2e}"))
    return out


def fixedpoint_gap(scheme, gamma, rho, s, grid_points=10 ** 4):
    """Relative gap between the solver's alpha and the grid minimiser of ``E_TQ``.

    Uses the fitted-model density with ``Q`` re-evaluated at every grid
    threshold.  Returns ``None`` when the fixed point falls below ``g_min``.
    """
    tail = PowerLawTail(gamma, 1.0, rho)
    dens = BodyTailDensity(tail)
    try:
        res = solver.solve_alpha(scheme, tail, s, dens, q_mode="model")
    except AlphaBelowGmin:
        return None
    grid = np.geomspace(tail.g_min * (1 + 1e-4), tail.g_min * 1e3, grid_points)
    best = grid[int(np.argmin(solver.e_tq_curve(scheme, tail, grid, s, dens)))]
    return res.alpha / best - 1


def suite_fixedpoint():
    out = []
    for scheme in solver.SCHEMES:
        gaps, skipped = [], 0
        for g, rho, s in lattice():
            gap = fixedpoint_gap(scheme, g, rho, s)
            if gap is None:
                skipped += 1
            else:
                gaps.append(abs(gap))
        bad = sum(x > 0.02 for x in gaps)
        out.append(
            Check(
                "fixedpoint", scheme, bad == 0,
                f"points={len(gaps)} below_gmin={skipped} over_2pct={bad} worst={max(gaps):.4f}",
            )
        )
    return out


def random_histogram(rng):
    """Random symmetric histogram with uneven bins (the Q functionals assume symmetry)."""
    half_bins = int(rng.integers(1, 33))
    half = rng.uniform(0.1, 10.0)
    inner = np.unique(rng.uniform(0.0, half, half_bins - 1))
    pos = np.concatenate(([0.0], inner, [half]))
    if np.any(np.diff(pos) <= 1e-9):
        pos = np.linspace(0.0, half, half_bins + 1)
    edges = np.concatenate((-pos[:0:-1], pos))
    m = rng.dirichlet(np.full(pos.size - 1, 0.5)) / 2
    return DensityHistogram(edges, np.concatenate((m[::-1], m)), symmetric=True)


def suite_holder(seed=0, n_hist=100, n_alpha=5, slack=1e-12):
    rng = np.random.default_rng(seed)
    viol = {"QN<=QU": 0, "QU<=1": 0, "QB*<=1": 0}
    for _ in range(n_hist):
        h = random_histogram(rng)
        top = h.edges[-1]
        for a in rng.uniform(0.01 * top, 1.5 * top, n_alpha):
            qu = solver.q_u(a, h)
            qn = solver.q_n(a, h)
            qb = solver.best_k(a, h)[1]
            viol["QN<=QU"] += qn > qu + slack
            viol["QU<=1"] += qu > 1 + slack
            viol["QB*<=1"] += qb > 1 + slack
    return [
        Check("holder", k, v == 0, f"violations={v} of {n_hist * n_alpha}") for k, v in viol.items()
    ]


def quant_term_slope(scheme, gamma, rho=0.1):
    tail = PowerLawTail(gamma, 1.0, rho)
    dens = BodyTailDensity(tail)
    terms = []
    for s in SLOPE_S:
        res = solver.solve_alpha(scheme, tail, s, dens, q_mode="model")
        terms.append(solver.quant_term(tail, res.q_value, s))
    return float(np.polyfit(np.log(SLOPE_S), np.log(terms), 1)[0])


def suite_slope():
    out = []
    for scheme in (solver.UNIFORM, solver.NONUNIFORM):
        for g in (3.5, 4.0, 5.0):
            want = (6 - 2 * g) / (g - 1)
            got = quant_term_slope(scheme, g)
            rel = abs(got - want) / abs(want)
            out.append(Check("slope", f"{scheme} gamma={g}", rel <= 0.05, f"slope={got:.4f} expected={want:.4f} rel={rel:.4f}"))
    return out


def suite_ordering():
    problem = solver.ProblemSpec(N=8, B=1, d=1000, sigma2=1.0, nu=1.0, eta=0.1, T=1000, F_gap=1.0)
    viol = {"TNQ<=TQ": 0, "TBQ<=TQ": 0}
    points = 0
    for g, rho, s in lattice():
        tail = PowerLawTail(g, 1.0, rho)
        dens = BodyTailDensity(tail)
        try:
            b = {sc: solver.convergence_bound(problem, sc, tail, s, dens, q_mode="model").total_bound for sc in solver.SCHEMES}
        except AlphaBelowGmin:
            continue
        points += 1
        viol["TNQ<=TQ"] += b[solver.NONUNIFORM] > b[solver.UNIFORM]
        viol["TBQ<=TQ"] += b[solver.BISCALED] > b[solver.UNIFORM]
    return [Check("ordering", k, v == 0, f"violations={v} of {points}") for k, v in viol.items()]


def suite_codec(seed=0, vectors=10 ** 4):
    rng = np.random.default_rng(seed)
    bad = 0
    for i in range(vectors):
        b = i % 8 + 1
        d = int(rng.integers(0, 300))
        x = rng.integers(0, 1 << b, d)
        data = codec.encode_bits(x, b)
        bad += len(data) != codec.payload_size(d, b) or not np.array_equal(codec.decode_bits(data, b, d), x)
    ex = codec.encode_bits([7, 0, 5], 3)
    return [
        Check("codec", "roundtrip", bad == 0, f"failures={bad} of {vectors}"),
        Check("codec", "b=3 [7,0,5]", ex == bytes([0x47, 0x01]), f"got={ex.hex()}"),
    ]


def suite_accounting(seed=0, T=20):
    from .sim import SCHEMES, benchmark_config, make_groups, run

    out = []
    for scheme in SCHEMES:
        cfg = benchmark_config(scheme, bits=3, seed=seed, T=T)
        m = run(cfg)
        p = cfg.problem
        if scheme == "dsgd":
            expect = 4 * p.d
        else:
            extra = 8 if scheme == "tbqsgd" else 0
            expect = sum(16 + extra + codec.payload_size(g.size, cfg.bits) for g in make_groups(p.d, cfg.group_fractions))
        cum = 0
        ok = True
        for r in m.records:
            cum += expect * p.N
            ok &= r["bytes_per_client"] == [expect] * p.N and r["cum_bytes"] == cum
        out.append(Check("accounting", scheme, ok, f"bytes_per_client={expect} rounds={T}"))
    return out


E2E_SCHEMES = ("dsgd", "tnqsgd", "tqsgd", "qsgd")


def e2e_losses(seeds=5, T=2000, bits=3, threads=1):
    from .sim import benchmark_config, run

    return {
        sc: [run(benchmark_config(sc, bits=bits, seed=seed, T=T, threads=threads)).final_loss for seed in range(seeds)]
        for sc in E2E_SCHEMES
    }


def suite_e2e(seeds=5, T=2000, threads=1):
    losses = e2e_losses(seeds, T, threads=threads)
    med = {k: float(np.median(v)) for k, v in losses.items()}
    desc = " ".join(f"{k}={v:.4g}" for k, v in med.items())
    order = med["dsgd"] <= med["tnqsgd"] <= med["tqsgd"] < med["qsgd"]
    ratio = med["qsgd"] / med["tqsgd"]
    return [
        Check("e2e", "DSGD<=TNQSGD<=TQSGD<QSGD", order, desc),
        Check("e2e", "QSGD>=5*TQSGD", ratio >= 5, f"ratio={ratio:.3f}"),
    ]


SUITES = {
    "unbiased": suite_unbiased,
    "lemma1": suite_lemma1,
    "bias": suite_bias,
    "fixedpoint": suite_fixedpoint,
    "holder": suite_holder,
    "slope": suite_slope,
    "ordering": suite_ordering,
    "codec": suite_codec,
    "accounting": suite_accounting,
    "e2e": suite_e2e,
}


def run_suite(name, **kw):
    """Run a suite and return ``(checks, seconds)``."""
    t0 = time.perf_counter()
    checks = SUITES[name](**kw)
    return checks, time.perf_counter() - t0
