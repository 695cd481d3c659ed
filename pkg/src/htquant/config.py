"""Simulation config files.

The format is INI (``configparser``) with one section per module::

    [problem]   N, B, d, sigma2, nu, eta, T, F_gap
    [sim]       scheme, bits, loss, weights, refit_every, seed, momentum, threads
    [noise]     gamma, tail_mass, group_scales, heterogeneity, heterogeneity_law, init_scale
    [groups]    fractions
    [solver]    gmin_quantile, q_mode, k_mode

Missing keys take the defaults printed by ``htquant config print-defaults``;
unknown sections or keys are rejected so typos do not pass silently.
"""

import configparser
import io

from .errors import InputError
from .sim import SimConfig, benchmark_config
from .solver import ProblemSpec

# (section, key) -> (SimConfig field, parser)
_FIELDS = {
    ("sim", "scheme"): ("scheme", str),
    ("sim", "bits"): ("bits", int),
    ("sim", "loss"): ("loss", str),
    ("sim", "weights"): ("weights", str),
    ("sim", "refit_every"): ("refit_every", int),
    ("sim", "seed"): ("seed", int),
    ("sim", "momentum"): ("momentum", float),
    ("sim", "threads"): ("threads", int),
    ("noise", "gamma"): ("noise_gamma", float),
    ("noise", "tail_mass"): ("noise_tail_mass", float),
    ("noise", "group_scales"): ("group_noise_scales", None),
    ("noise", "heterogeneity"): ("heterogeneity", float),
    ("noise", "heterogeneity_law"): ("heterogeneity_law", str),
    ("noise", "init_scale"): ("init_scale", float),
    ("groups", "fractions"): ("group_fractions", None),
    ("solver", "gmin_quantile"): ("gmin_quantile", float),
    ("solver", "q_mode"): ("q_mode", str),
    ("solver", "k_mode"): ("k_mode", str),
}
_PROBLEM_TYPES = dict(N=int, B=int, d=int, sigma2=float, nu=float, eta=float, T=int, F_gap=float)


def _floats(text):
    return tuple(float(x) for x in text.replace(",", " ").split())


def default_config():
    """Defaults are the heavy-tailed quadratic benchmark with TQSGD at 3 bits."""
    return benchmark_config("tqsgd")


def to_text(cfg):
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp["problem"] = {k: str(getattr(cfg.problem, k)) for k in _PROBLEM_TYPES}
    for (sec, key), (name, _) in _FIELDS.items():
        if sec not in cp:
            cp[sec] = {}
        val = getattr(cfg, name)
        cp[sec][key] = " ".join(str(v) for v in val) if isinstance(val, tuple) else str(val)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def parse_text(text, base=None):
    base = default_config() if base is None else base
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise InputError(f"config parse error: {exc}") from exc
    known = {"problem"} | {sec for sec, _ in _FIELDS}
    problem = {k: getattr(base.problem, k) for k in _PROBLEM_TYPES}
    kw = {}
    for sec in cp.sections():
        if sec not in known:
            raise InputError(f"unknown config section [{sec}]")
        for key, raw in cp[sec].items():
            try:
                if sec == "problem":
                    if key not in _PROBLEM_TYPES:
                        raise InputError(f"unknown key {key!r} in [problem]")
                    problem[key] = _PROBLEM_TYPES[key](raw)
                    continue
                if (sec, key) not in _FIELDS:
                    raise InputError(f"unknown key {key!r} in [{sec}]")
                name, conv = _FIELDS[(sec, key)]
                kw[name] = _floats(raw) if conv is None else conv(raw)
            except ValueError as exc:
                raise InputError(f"[{sec}] {key}: {exc}") from exc
    fields = {name: getattr(base, name) for name, _ in _FIELDS.values()}
    fields.update(kw)
    return SimConfig(problem=ProblemSpec(**problem), **fields)


def load(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_text(fh.read())
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
