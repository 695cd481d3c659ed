"""Multi-client distributed SGD with gradient compression.

Each round every client computes a mini-batch gradient at the broadcast
model, compresses each parameter group into an ``HTQ1`` message, and the
server decodes, aggregates with client weights (in ascending client order)
and takes a plain SGD step.  Messages always go through the full
encode/decode path even though they never leave the process.

Randomness is derived from the top-level seed as
``SeedSequence(seed, spawn_key=(crc32(purpose), *indices))`` so results do
not depend on how clients are scheduled.
"""

import json
import logging
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import codec, solver
from .errors import (
    CorruptMessage,
    DimensionMismatch,
    HTQError,
    IncompatibleConfigs,
    InputError,
    SimulationError,
)
from .quantizer import (
    BISCALED,
    CUBEROOT,
    UNIFORM,
    Codebook,
    DensitySpec,
    build_codebook,
    dequantize,
    make_rng,
    stochastic_quantize,
    truncate,
)
from .solver import ProblemSpec
from .tail import HybridDensity, empirical_density, fit_tail

log = logging.getLogger(__name__)

SCHEMES = ("dsgd", "qsgd", "nqsgd", "tqsgd", "tnqsgd", "tbqsgd")
TRUNCATED = {"tqsgd": solver.UNIFORM, "tnqsgd": solver.NONUNIFORM, "tbqsgd": solver.BISCALED}
WIRE_SCHEME = {"tqsgd": "tq", "tnqsgd": "tnq", "tbqsgd": "tbq", "qsgd": "qsgd", "nqsgd": "nqsgd"}
LOSSES = ("quadratic", "logistic")


def derive_seed(seed, purpose, *index):
    return np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(purpose.encode()), *map(int, index)))


def derive_rng(seed, purpose, *index):
    return make_rng(derive_seed(seed, purpose, *index))


def f32(x):
    return float(np.float32(x))


def f32_ceil(x):
    """Smallest float32 >= x (so a float32 header alpha still covers max|g|)."""
    y = np.float32(x)
    if float(y) < x:
        y = np.nextafter(y, np.float32(np.inf))
    return float(y)


@dataclass(frozen=True)
class ParamGroup:
    name: str
    start: int
    stop: int

    @property
    def size(self):
        return self.stop - self.start


def make_groups(d, fractions=(0.6, 0.4), names=None):
    """Split ``[0, d)`` into contiguous groups with the given size fractions."""
    if names is None:
        names = ["conv", "fc"] if len(fractions) == 2 else [f"g{i}" for i in range(len(fractions))]
    total = float(sum(fractions))
    cuts = [0]
    acc = 0.0
    for f in fractions[:-1]:
        acc += f / total
        cuts.append(int(round(acc * d)))
    cuts.append(d)
    groups = [ParamGroup(n, a, b) for n, a, b in zip(names, cuts[:-1], cuts[1:])]
    if any(g.size <= 0 for g in groups):
        raise InputError(f"group fractions {fractions} leave an empty group for d={d}")
    return groups


@dataclass(frozen=True)
class SimConfig:
    problem: ProblemSpec
    scheme: str = "tqsgd"
    bits: int = 3
    loss: str = "quadratic"
    weights: str = "data"
    refit_every: int = 10
    seed: int = 0
    group_fractions: tuple = (0.6, 0.4)
    noise_gamma: float = 4.0
    noise_tail_mass: float = 0.1
    group_noise_scales: tuple = (1.0, 2.0)
    heterogeneity: float = 0.0
    heterogeneity_law: str = "pareto"
    init_scale: float = 1.0
    gmin_quantile: float = 0.9
    q_mode: str = "empirical"
    k_mode: str = "one-step"
    momentum: float = 0.0
    threads: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise InputError(f"unknown scheme {self.scheme!r}")
        if self.loss not in LOSSES:
            raise InputError(f"unknown loss {self.loss!r}")
        if self.weights not in ("data", "uniform"):
            raise InputError(f"unknown weights mode {self.weights!r}")
        if self.scheme != "dsgd" and not 1 <= self.bits <= 8:
            raise InputError(f"bits must be in 1..8, got {self.bits}")
        if self.heterogeneity_law not in ("pareto", "gaussian"):
            raise InputError(f"unknown heterogeneity_law {self.heterogeneity_law!r}")
        if self.refit_every < 1:
            raise InputError("refit_every must be >= 1")
        if len(self.group_noise_scales) != len(self.group_fractions):
            raise InputError("group_noise_scales must match group_fractions")
        if self.noise_gamma <= 3:
            raise InputError("noise_gamma must exceed 3 for finite variance")
        if not 0 < self.noise_tail_mass < 0.5:
            raise InputError("noise_tail_mass must lie in (0, 0.5)")

    @property
    def s(self):
        return (1 << self.bits) - 1

    def to_dict(self):
        d = asdict(self)
        d["group_fractions"] = list(self.group_fractions)
        d["group_noise_scales"] = list(self.group_noise_scales)
        return d


def symmetric_pareto(shape, gamma, var, rng, tail_mass=0.1):
    """Symmetric noise: uniform body on ``[-x_m, x_m]`` plus exact Pareto tails.

    Each tail carries ``tail_mass`` with density ``~ |x|^-gamma`` beyond
    ``x_m``; ``x_m`` is set so the variance equals ``var``.
    """
    rho = tail_mass
    x_m = math.sqrt(var / ((1 - 2 * rho) / 3 + 2 * rho * (gamma - 1) / (gamma - 3)))
    u = rng.random(shape)
    v = rng.random(shape)
    in_tail = u < 2 * rho
    mag = np.where(in_tail, x_m * (1.0 - v) ** (-1.0 / (gamma - 1.0)), x_m * v)
    # reuse u for the sign: u/(2 rho) and (u - 2 rho)/(1 - 2 rho) are uniform given the branch
    frac = np.where(in_tail, u / (2 * rho), (u - 2 * rho) / (1 - 2 * rho))
    return np.where(frac < 0.5, -mag, mag)


class QuadraticProblem:
    """``F(theta) = 1/2 ||theta - theta*||^2`` with per-client optima and Pareto gradient noise.

    Client i has optimum ``theta*_i = c + h * z_i`` with ``z_i`` drawn from the
    same heavy-tailed law as the noise or a standard normal (unit variance); ``theta*`` is their
    weighted mean so ``grad F = theta - theta*``.  Losses are reported as the
    optimality gap, so ``F* = 0``.
    """

    def __init__(self, cfg, groups):
        p = cfg.problem
        rng = derive_rng(cfg.seed, "init")
        self.d = p.d
        self.N = p.N
        self.B = p.B
        self.cfg = cfg
        centre = cfg.init_scale * rng.standard_normal(p.d)
        if cfg.heterogeneity_law == "gaussian":
            z = rng.standard_normal((p.N, p.d))
        else:
            z = symmetric_pareto((p.N, p.d), cfg.noise_gamma, 1.0, rng, cfg.noise_tail_mass)
        offsets = cfg.heterogeneity * z
        self.sizes = rng.integers(50, 151, size=p.N)
        self.weights = client_weights(cfg.weights, self.sizes)
        self.optima = centre + offsets
        self.optimum = self.weights @ self.optima
        self.theta0 = np.zeros(p.d)
        scales = np.empty(p.d)
        for g, c in zip(groups, cfg.group_noise_scales):
            scales[g.start:g.stop] = c
        # per-sample noise variance per coordinate; sums to sigma2 over coordinates
        self.coord_var = p.sigma2 * scales ** 2 / np.sum(scales ** 2)

    def loss(self, theta):
        r = theta - self.optimum
        return 0.5 * float(r @ r)

    def full_grad(self, theta):
        return theta - self.optimum

    def noise(self, rng, B=None):
        B = self.B if B is None else B
        draws = symmetric_pareto((B, self.d), self.cfg.noise_gamma, 1.0, rng, self.cfg.noise_tail_mass)
        return np.sqrt(self.coord_var) * draws.mean(axis=0)

    def client_grad(self, theta, i, rng):
        g = theta - self.optima[i]
        if self.cfg.problem.sigma2 > 0:
            g = g + self.noise(rng)
        return g


class LogisticProblem:
    """Logistic regression on two Gaussian classes split across clients."""

    def __init__(self, cfg, groups):
        p = cfg.problem
        rng = derive_rng(cfg.seed, "init")
        self.d = p.d
        self.N = p.N
        self.B = p.B
        self.sizes = rng.integers(50, 151, size=p.N)
        self.weights = client_weights(cfg.weights, self.sizes)
        mu = rng.standard_normal(p.d) / math.sqrt(p.d)
        self.data = []
        for i in range(p.N):
            n = int(self.sizes[i])
            y = (rng.random(n) < 0.5).astype(np.float64)
            x = rng.standard_normal((n, p.d)) + np.outer(2 * y - 1, mu) * 2.0
            self.data.append((x, y))
        self.theta0 = np.zeros(p.d)

    @staticmethod
    def _sig(z):
        return 0.5 * (1.0 + np.tanh(0.5 * z))

    def loss(self, theta):
        total = 0.0
        for w, (x, y) in zip(self.weights, self.data):
            z = x @ theta
            total += w * float(np.mean(np.logaddexp(0.0, z) - y * z))
        return total

    def full_grad(self, theta):
        g = np.zeros(self.d)
        for w, (x, y) in zip(self.weights, self.data):
            g += w * (x.T @ (self._sig(x @ theta) - y)) / y.size
        return g

    def client_grad(self, theta, i, rng):
        x, y = self.data[i]
        j = rng.integers(0, y.size, size=self.B)
        xb, yb = x[j], y[j]
        return xb.T @ (self._sig(xb @ theta) - yb) / self.B


def client_weights(mode, sizes):
    if mode == "uniform":
        return np.full(len(sizes), 1.0 / len(sizes))
    sizes = np.asarray(sizes, dtype=np.float64)
    return sizes / sizes.sum()


def make_problem(cfg, groups):
    return QuadraticProblem(cfg, groups) if cfg.loss == "quadratic" else LogisticProblem(cfg, groups)


@dataclass
class GroupState:
    """Quantizer parameters shared by clients and server for one parameter group."""

    fit: object = None
    alpha: float = None
    k: float = None
    s_alpha: int = None
    s_beta: int = None
    histogram: object = None
    codebook: Codebook = None
    floored: bool = False

    def summary(self):
        out = {}
        if self.fit is not None:
            out.update(gamma=self.fit.gamma, g_min=self.fit.g_min, rho=self.fit.rho)
        if self.alpha is not None:
            out["alpha"] = self.alpha
            if self.floored:
                out["alpha_floored"] = True
        if self.k is not None:
            out.update(k=self.k, s_alpha=self.s_alpha, s_beta=self.s_beta)
        return out


def refit_group(cfg, values):
    """Fit tail + density on pooled gradients and derive the group's quantizer."""
    st = GroupState()
    st.histogram = empirical_density(values, symmetrize=True)
    if cfg.scheme == "nqsgd":
        return st
    st.fit = fit_tail(values, quantile=cfg.gmin_quantile)
    density = HybridDensity(st.histogram, st.fit)
    res = solver.solve_alpha(
        TRUNCATED[cfg.scheme], st.fit, cfg.s, density, q_mode=cfg.q_mode, k_mode=cfg.k_mode,
        floor_at_gmin=True,
    )
    st.floored = res.floored
    st.alpha = f32(res.alpha)
    if cfg.scheme == "tqsgd":
        spec = DensitySpec(UNIFORM, st.alpha, cfg.s)
    elif cfg.scheme == "tnqsgd":
        spec = DensitySpec(CUBEROOT, st.alpha, cfg.s, histogram=density.histogram(st.alpha))
    else:
        st.k, st.s_alpha, st.s_beta = f32(res.k), res.s_alpha, res.s_beta
        spec = DensitySpec(BISCALED, st.alpha, cfg.s, k=st.k, s_alpha=st.s_alpha, s_beta=st.s_beta)
    st.codebook = build_codebook(spec)
    return st


def codebook_for(msg, state, s):
    """Rebuild the codebook a message was quantized with from its header and shared state."""
    if msg.scheme in ("tq", "tnq"):
        if state.codebook is None or msg.alpha != state.alpha:
            raise CorruptMessage("message alpha does not match the shared quantizer state")
        return state.codebook
    if msg.scheme == "tbq":
        return build_codebook(
            DensitySpec(BISCALED, msg.alpha, msg.s_alpha + msg.s_beta, k=msg.k, s_alpha=msg.s_alpha, s_beta=msg.s_beta)
        )
    if msg.scheme == "qsgd":
        return build_codebook(DensitySpec(UNIFORM, msg.alpha, s))
    return build_codebook(DensitySpec(CUBEROOT, msg.alpha, s, histogram=state.histogram))


def encode_group(cfg, values, state, rng_seed):
    """Compress one group's gradient into wire bytes."""
    wire = WIRE_SCHEME[cfg.scheme]
    if cfg.scheme in TRUNCATED:
        cb = state.codebook
        alpha = state.alpha
    else:
        alpha = f32_ceil(max(float(np.max(np.abs(values))), np.finfo(np.float32).tiny))
        cb = codebook_for(codec.QuantizedMessage(wire, cfg.bits, alpha, np.empty(0)), state, cfg.s)
    idx = stochastic_quantize(truncate(values, alpha), cb, rng_seed)
    msg = codec.QuantizedMessage(wire, cfg.bits, alpha, idx, state.k, state.s_alpha, state.s_beta)
    return msg.to_bytes()


def decode_group(data, state, s, size):
    msg = codec.QuantizedMessage.from_bytes(data)
    if msg.d != size:
        raise DimensionMismatch(f"message carries {msg.d} values, group expects {size}")
    return dequantize(msg.indices, codebook_for(msg, state, s))


def server_aggregate(vectors, weights):
    """Weighted sum of decoded client gradients, accumulated in client order."""
    w = np.asarray(weights, dtype=np.float64)
    if len(vectors) != w.size:
        raise DimensionMismatch(f"{len(vectors)} messages for {w.size} weights")
    if abs(w.sum() - 1.0) > 1e-9:
        raise InputError(f"weights sum to {w.sum()}, expected 1")
    d = len(vectors[0])
    out = np.zeros(d)
    for wi, v in zip(w, vectors):
        if len(v) != d:
            raise DimensionMismatch("client vectors differ in dimension")
        out += wi * np.asarray(v, dtype=np.float64)
    return out


@dataclass
class MetricsLog:
    config: dict
    records: list = field(default_factory=list)
    final_loss: float = None
    final_grad_norm_sq: float = None

    def to_jsonl(self):
        lines = [json.dumps({"config": self.config}, sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True) for r in self.records]
        lines.append(json.dumps({"final_loss": self.final_loss, "final_grad_norm_sq": self.final_grad_norm_sq}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @property
    def losses(self):
        return np.array([r["loss"] for r in self.records])


def run(cfg, progress=None):
    """Run ``cfg.problem.T`` rounds and return the per-round metrics."""
    p = cfg.problem
    groups = make_groups(p.d, cfg.group_fractions)
    prob = make_problem(cfg, groups)
    theta = prob.theta0.copy()
    velocity = np.zeros(p.d)
    states = [GroupState() for _ in groups]
    # thread count is an execution detail, kept out of the log so outputs match across schedules
    logm = MetricsLog(config={k: v for k, v in cfg.to_dict().items() if k != "threads"})
    cum = 0
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None

    def client_grad(i, t):
        return prob.client_grad(theta, i, derive_rng(cfg.seed, "grad", t, i))

    def client_send(i, t, grad):
        msgs = []
        for gi, g in enumerate(groups):
            try:
                msgs.append(encode_group(cfg, grad[g.start:g.stop], states[gi], derive_seed(cfg.seed, "quant", t, i, gi)))
            except HTQError as exc:
                raise SimulationError(f"round {t}, client {i}, group {g.name}: {exc}", exc) from exc
        return msgs

    try:
        for t in range(p.T):
            mapper = pool.map if pool else map
            grads = list(mapper(lambda i: client_grad(i, t), range(p.N)))
            rec = {"round": t, "loss": prob.loss(theta)}
            fg = prob.full_grad(theta)
            rec["grad_norm_sq"] = float(fg @ fg)
            if cfg.scheme == "dsgd":
                agg = server_aggregate(grads, prob.weights)
                per_client = [4 * p.d] * p.N
            else:
                if t % cfg.refit_every == 0 and cfg.scheme != "qsgd":
                    for gi, g in enumerate(groups):
                        pooled = np.concatenate([gr[g.start:g.stop] for gr in grads])
                        try:
                            states[gi] = refit_group(cfg, pooled)
                        except HTQError as exc:
                            raise SimulationError(f"round {t}, group {g.name} refit: {exc}", exc) from exc
                sent = list(mapper(lambda i: client_send(i, t, grads[i]), range(p.N)))
                per_client = [sum(len(m) for m in msgs) for msgs in sent]
                decoded = []
                for i, msgs in enumerate(sent):
                    vec = np.empty(p.d)
                    for gi, (g, m) in enumerate(zip(groups, msgs)):
                        try:
                            vec[g.start:g.stop] = decode_group(m, states[gi], cfg.s, g.size)
                        except HTQError as exc:
                            raise SimulationError(f"round {t}, client {i}, group {g.name}: {exc}", exc) from exc
                    decoded.append(vec)
                agg = server_aggregate(decoded, prob.weights)
            cum += sum(per_client)
            rec["bytes_per_client"] = per_client
            rec["bytes_round"] = sum(per_client)
            rec["cum_bytes"] = cum
            if cfg.scheme != "dsgd" and cfg.scheme != "qsgd":
                rec["groups"] = {g.name: states[gi].summary() for gi, g in enumerate(groups)}
            logm.records.append(rec)
            if cfg.momentum:
                velocity = cfg.momentum * velocity + agg
                theta = theta - p.eta * velocity
            else:
                theta = theta - p.eta * agg
            if progress is not None:
                progress(t)
    finally:
        if pool:
            pool.shutdown()
    logm.final_loss = prob.loss(theta)
    fg = prob.full_grad(theta)
    logm.final_grad_norm_sq = float(fg @ fg)
    return logm


def compare(configs, progress=None):
    """Run configs that share problem, loss and seed; return aligned rows and the trade-off table."""
    if not configs:
        raise IncompatibleConfigs("no configs to compare")
    ref = configs[0]
    for c in configs[1:]:
        if c.problem != ref.problem or c.loss != ref.loss or c.seed != ref.seed:
            raise IncompatibleConfigs("configs must share problem, loss and seed")
        strip = lambda x: replace(x, scheme="dsgd", bits=3, threads=1)
        if strip(c) != strip(ref):
            raise IncompatibleConfigs("configs may differ only in scheme and bits")
    rows, table = [], []
    for c in configs:
        m = run(c, progress)
        bits = c.bits if c.scheme != "dsgd" else 32
        for r in m.records:
            rows.append(
                {"scheme": c.scheme, "bits": bits, "round": r["round"], "loss": r["loss"],
                 "grad_norm_sq": r["grad_norm_sq"], "cum_bytes": r["cum_bytes"]}
            )
        table.append(
            {"scheme": c.scheme, "bits": bits, "bytes_per_round": m.records[-1]["bytes_round"],
             "final_loss": m.final_loss, "final_grad_norm_sq": m.final_grad_norm_sq}
        )
    return rows, table


def benchmark_config(scheme, bits=3, seed=0, T=2000, **overrides):
    """The heavy-tailed quadratic benchmark used by the ordering checks.

    Per-sample noise is uniform-body/Pareto(3.5) with total variance 1000 over
    ``d = 1000`` coordinates; client optima differ by Gaussian offsets of scale
    2 so truncation carries a visible bias.
    """
    problem = ProblemSpec(N=8, B=1, d=1000, sigma2=1000.0, nu=1.0, eta=0.3, T=T, F_gap=500.0)
    kw = dict(
        problem=problem, scheme=scheme, bits=bits, seed=seed, noise_gamma=3.5,
        heterogeneity=2.0, heterogeneity_law="gaussian",
    )
    kw.update(overrides)
    return SimConfig(**kw)
