"""Command-line entry point: ``htquant <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 input/parse error, 4 numerical
failure, 5 verification failure.  Errors are also written to stderr as a
single JSON object.  Every output file gets a ``<out>.manifest.json``
recording the resolved configuration, seed, version and wall-clock time.
"""

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, codec, config, solver, verify
from .errors import HTQError, InputError
from .quantizer import (
    BISCALED,
    CUBEROOT,
    UNIFORM,
    Codebook,
    DensitySpec,
    build_codebook,
    dequantize,
    stochastic_quantize,
    truncate,
)
from .sim import compare, derive_seed, f32, f32_ceil, run
from .tail import PowerLawTail, empirical_density, fit_tail, read_gradient_dump, sample_powerlaw, write_f32

log = logging.getLogger("htquant")

EXIT_VERIFY = 5
WIRE_TO_SOLVER = {"tq": solver.UNIFORM, "tnq": solver.NONUNIFORM, "tbq": solver.BISCALED}


class Manifest:
    def __init__(self, args, subcommand):
        self.args = args
        self.subcommand = subcommand
        self.t0 = time.perf_counter()
        self.inputs = []
        self.outputs = []
        self.resolved = {}

    def write(self, out_path):
        data = {
            "subcommand": self.subcommand,
            "version": __version__,
            "seed": self.args.seed,
            "threads": self.args.threads,
            "args": {k: v for k, v in vars(self.args).items() if k != "func" and _jsonable(v)},
            "config": self.resolved,
            "inputs": [str(p) for p in self.inputs],
            "outputs": [str(p) for p in self.outputs],
            "duration_s": time.perf_counter() - self.t0,
        }
        Path(str(out_path) + ".manifest.json").write_text(_dump_json(data))


def _np_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _jsonable(v):
    try:
        json.dumps(v)
        return True
    except TypeError:
        return False


def _dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True, default=_np_default) + "\n"


def _emit(text, out, manifest):
    """Write ``text`` to ``out`` (plus its manifest) or to stdout."""
    if out is None or str(out) == "-":
        sys.stdout.write(text)
        return
    Path(out).write_text(text)
    manifest.outputs.append(out)
    manifest.write(out)


def _load_tail(args):
    if args.tail:
        try:
            return PowerLawTail.from_dict(json.loads(Path(args.tail).read_text()))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise InputError(f"cannot read tail JSON {args.tail}: {exc}") from exc
    if None in (args.gamma, args.g_min, args.rho):
        raise InputError("give --tail FILE or all of --gamma, --g-min, --rho")
    return PowerLawTail(args.gamma, args.g_min, args.rho)


def _density(args, tail):
    if args.q_mode == "empirical":
        if not args.samples:
            raise InputError("--q-mode empirical needs --samples DUMP")
        return empirical_density(read_gradient_dump(args.samples).values)
    return None


def _parse_bits_range(text):
    try:
        lo, hi = (int(x) for x in text.split(":"))
    except ValueError as exc:
        raise InputError(f"--sweep-bits expects LO:HI, got {text!r}") from exc
    if not 1 <= lo <= hi <= 8:
        raise InputError(f"bit range {text} must lie within 1..8")
    return range(lo, hi + 1)


# ---------------------------------------------------------------- subcommands


def cmd_fit(args, man):
    sample = read_gradient_dump(args.input)
    man.inputs.append(args.input)
    tail = fit_tail(sample.values, quantile=args.quantile, g_min=args.g_min)
    man.resolved = {"quantile": args.quantile, "g_min": args.g_min}
    _emit(_dump_json(tail.to_dict()), args.out, man)


def cmd_solve(args, man):
    tail = _load_tail(args)
    dens = _density(args, tail)
    s = (1 << args.bits) - 1
    res = solver.solve_alpha(
        args.scheme, tail, s, dens, q_mode=args.q_mode, k_mode=args.k_mode,
        strict=args.strict, floor_at_gmin=args.floor_at_gmin, max_iter=args.max_iter,
    )
    out = res.to_dict()
    eb = solver.error_tq(
        args.scheme, tail, res.alpha, s, args.dim, args.clients, dens, args.q_mode,
        k=res.k, s_alpha=res.s_alpha, s_beta=res.s_beta,
    )
    out["error"] = {k: eb.to_dict()[k] for k in ("quant_variance", "trunc_bias", "e_tq")}
    out["tail"] = tail.to_dict()
    man.resolved = {"s": s, "tail": tail.to_dict()}
    _emit(_dump_json(out), args.out, man)


def _problem(args):
    return solver.ProblemSpec(
        N=args.clients, B=args.batch, d=args.dim, sigma2=args.sigma2, nu=args.nu,
        eta=args.eta, T=args.rounds, F_gap=args.f_gap,
    )


def cmd_bound(args, man):
    tail = _load_tail(args)
    dens = _density(args, tail)
    problem = _problem(args)
    man.resolved = {"problem": vars(problem), "tail": tail.to_dict()}

    def one(bits):
        return solver.convergence_bound(
            problem, args.scheme, tail, (1 << bits) - 1, dens, q_mode=args.q_mode,
            k_mode=args.k_mode, floor_at_gmin=args.floor_at_gmin,
        )

    if args.sweep_bits is None:
        _emit(_dump_json(one(args.bits).to_dict()), args.out, man)
        return
    cols = ["bits", "s", "alpha", "q_value", "quant_variance", "trunc_bias", "e_tq", "quant_term", "e_dsgd", "total_bound"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for b in _parse_bits_range(args.sweep_bits):
        eb = one(b)
        row = dict(eb.to_dict(), **{k: eb.extras[k] for k in ("alpha", "q_value", "quant_term")})
        row.update(bits=b, s=(1 << b) - 1)
        w.writerow([repr(float(row[c])) if c not in ("bits", "s") else row[c] for c in cols])
    _emit(buf.getvalue(), args.out, man)


def _codebook_for_values(args, values):
    """Solve and build the quantizer for one vector; returns (alpha, codebook, extras)."""
    s = (1 << args.bits) - 1
    extras = {}
    if args.scheme in ("qsgd", "nqsgd"):
        alpha = f32_ceil(max(float(np.max(np.abs(values))), np.finfo(np.float32).tiny))
        if args.scheme == "qsgd":
            return alpha, build_codebook(DensitySpec(UNIFORM, alpha, s)), extras
        hist = empirical_density(values)
        return alpha, build_codebook(DensitySpec(CUBEROOT, alpha, s, histogram=hist)), extras
    tail = fit_tail(values, quantile=args.quantile)
    hist = empirical_density(values)
    res = solver.solve_alpha(
        WIRE_TO_SOLVER[args.scheme], tail, s, hist, q_mode=args.q_mode, k_mode=args.k_mode,
        floor_at_gmin=args.floor_at_gmin,
    )
    alpha = f32(res.alpha)
    extras["tail"] = tail.to_dict()
    extras["solver"] = res.to_dict()
    if args.scheme == "tq":
        spec = DensitySpec(UNIFORM, alpha, s)
    elif args.scheme == "tnq":
        spec = DensitySpec(CUBEROOT, alpha, s, histogram=hist)
    else:
        extras.update(k=f32(res.k), s_alpha=res.s_alpha, s_beta=res.s_beta)
        spec = DensitySpec(BISCALED, alpha, s, k=extras["k"], s_alpha=res.s_alpha, s_beta=res.s_beta)
    return alpha, build_codebook(spec), extras


def cmd_quantize(args, man):
    values = read_gradient_dump(args.input).values
    man.inputs.append(args.input)
    alpha, cb, extras = _codebook_for_values(args, values)
    idx = stochastic_quantize(truncate(values, alpha), cb, derive_seed(args.seed, "quantize"))
    msg = codec.QuantizedMessage(args.scheme, args.bits, alpha, idx, extras.get("k"), extras.get("s_alpha"), extras.get("s_beta"))
    Path(args.output).write_bytes(msg.to_bytes())
    book = Path(str(args.output) + ".codebook.json")
    book.write_text(_dump_json({"levels": [float(x) for x in cb.levels]}))
    man.outputs += [args.output, book]
    man.resolved = dict(extras, alpha=alpha, bytes=msg.nbytes())
    man.write(args.output)


def cmd_dequantize(args, man):
    msg = codec.QuantizedMessage.from_bytes(Path(args.input).read_bytes())
    man.inputs.append(args.input)
    book = args.codebook or str(args.input) + ".codebook.json"
    if Path(book).exists():
        cb = Codebook(np.array(json.loads(Path(book).read_text())["levels"]))
        man.inputs.append(book)
    elif msg.scheme in ("tq", "qsgd"):
        cb = build_codebook(DensitySpec(UNIFORM, msg.alpha, (1 << msg.bits) - 1))
    elif msg.scheme == "tbq":
        cb = build_codebook(
            DensitySpec(BISCALED, msg.alpha, msg.s_alpha + msg.s_beta, k=msg.k, s_alpha=msg.s_alpha, s_beta=msg.s_beta)
        )
    else:
        raise InputError(f"scheme {msg.scheme} needs its codebook file (--codebook)")
    if cb.s != (1 << msg.bits) - 1 and msg.scheme != "tbq":
        raise InputError("codebook size does not match the message bit width")
    vals = dequantize(msg.indices, cb)
    if str(args.output).lower().endswith(".csv"):
        np.savetxt(args.output, vals, fmt="%.9g")
    else:
        write_f32(args.output, vals)
    man.outputs.append(args.output)
    man.resolved = {"scheme": msg.scheme, "bits": msg.bits, "alpha": msg.alpha, "d": msg.d}
    man.write(args.output)


def _sim_config(args):
    from dataclasses import replace

    cfg = config.load(args.config) if args.config else config.default_config()
    over = {}
    if args.scheme:
        over["scheme"] = args.scheme
    if args.bits is not None:
        over["bits"] = args.bits
    if args.seed_given:
        over["seed"] = args.seed
    over["threads"] = args.threads
    return replace(cfg, **over)


def _progress(args, T):
    if not args.progress:
        return None

    def cb(t):
        if (t + 1) % max(T // 20, 1) == 0:
            log.info("round %d/%d", t + 1, T)

    return cb


def cmd_simulate(args, man):
    cfg = _sim_config(args)
    if args.config:
        man.inputs.append(args.config)
    man.resolved = cfg.to_dict()
    metrics = run(cfg, _progress(args, cfg.problem.T))
    _emit(metrics.to_jsonl(), args.out, man)


def cmd_compare(args, man):
    from dataclasses import replace

    base = _sim_config(args)
    if args.config:
        man.inputs.append(args.config)
    schemes = [s.strip() for s in args.schemes.split(",") if s.strip()]
    bits = [int(b) for b in str(args.bit_list).split(",")]
    configs = []
    for sc in schemes:
        for b in ([3] if sc == "dsgd" else bits):
            configs.append(replace(base, scheme=sc, bits=b))
    man.resolved = {"base": base.to_dict(), "schemes": schemes, "bits": bits}
    rows, table = compare(configs, _progress(args, base.problem.T))
    cols = ["scheme", "bits", "round", "loss", "grad_norm_sq", "cum_bytes"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in cols})
    _emit(buf.getvalue(), args.out, man)
    if args.table:
        tcols = ["scheme", "bits", "bytes_per_round", "final_loss", "final_grad_norm_sq"]
        tb = io.StringIO()
        tw = csv.DictWriter(tb, fieldnames=tcols, lineterminator="\n")
        tw.writeheader()
        for r in table:
            tw.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in tcols})
        _emit(tb.getvalue(), args.table, man)


def cmd_verify(args, man):
    names = list(verify.SUITES) if "all" in args.suites else args.suites
    ok = True
    for name in names:
        kw = {"threads": args.threads} if name == "e2e" else {}
        checks, secs = verify.run_suite(name, **kw)
        for c in checks:
            print(c.line())
            ok &= c.passed
        print(f"-- {name}: {'pass' if all(c.passed for c in checks) else 'FAIL'} ({secs:.1f}s)")
    return 0 if ok else EXIT_VERIFY


def cmd_synth(args, man):
    rng = np.random.Generator(np.random.Philox(derive_seed(args.seed, "synth")))
    x = sample_powerlaw(args.n, args.gamma, args.g_min, rng)
    write_f32(args.out, x)
    man.outputs.append(args.out)
    man.resolved = {"n": args.n, "gamma": args.gamma, "g_min": args.g_min}
    man.write(args.out)


def cmd_config(args, man):
    if args.action == "print-defaults":
        sys.stdout.write(config.to_text(config.default_config()))
    else:
        cfg = config.load(args.file)
        sys.stdout.write(config.to_text(cfg))


# ---------------------------------------------------------------- parser


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="top-level seed (default 0)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def _tail_flags(p):
    p.add_argument("--tail", help="fitted-tail JSON (from `fit`)")
    p.add_argument("--gamma", type=float)
    p.add_argument("--g-min", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--q-mode", choices=solver.Q_MODES, default="model",
                   help="source of Q: empirical histogram (needs --samples), fitted model, or Q=1")
    p.add_argument("--samples", help="gradient dump for the empirical density")
    p.add_argument("--k-mode", choices=solver.K_MODES, default="one-step")
    p.add_argument("--floor-at-gmin", action="store_true", help="lift a fixed point below g_min instead of failing")


def build_parser():
    common = _common()
    ap = argparse.ArgumentParser(prog="htquant", description="Truncated gradient quantization toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common], help="fit the power-law tail of a gradient dump")
    p.add_argument("input")
    p.add_argument("--out")
    p.add_argument("--quantile", type=float, default=0.9)
    p.add_argument("--g-min", type=float, default=None, help="fix g_min instead of using the quantile")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("solve", parents=[common], help="optimal truncation threshold")
    _tail_flags(p)
    p.add_argument("--scheme", choices=solver.SCHEMES, default=solver.UNIFORM)
    p.add_argument("--bits", type=int, default=3)
    p.add_argument("--clients", type=int, default=1)
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--strict", action="store_true", help="fail (exit 4) if the iteration does not converge")
    p.add_argument("--max-iter", type=int, default=solver.MAX_ITER, help="fixed-point iteration cap")
    p.add_argument("--out")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("bound", parents=[common], help="error breakdown and convergence bound")
    _tail_flags(p)
    p.add_argument("--scheme", choices=solver.SCHEMES, default=solver.UNIFORM)
    p.add_argument("--bits", type=int, default=3)
    p.add_argument("--sweep-bits", help="LO:HI, emit a CSV with one row per bit width")
    p.add_argument("--clients", type=int, default=8)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--dim", type=int, default=1000)
    p.add_argument("--sigma2", type=float, default=1.0)
    p.add_argument("--nu", type=float, default=1.0)
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--rounds", type=int, default=1000)
    p.add_argument("--f-gap", type=float, default=1.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("quantize", parents=[common], help="truncate, quantize and encode a gradient dump")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--scheme", choices=list(codec.SCHEME_IDS), default="tq")
    p.add_argument("--bits", type=int, default=3)
    p.add_argument("--quantile", type=float, default=0.9)
    p.add_argument("--q-mode", choices=solver.Q_MODES, default="empirical")
    p.add_argument("--k-mode", choices=solver.K_MODES, default="one-step")
    p.add_argument("--floor-at-gmin", action="store_true")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("dequantize", parents=[common], help="decode an HTQ1 message")
    p.add_argument("input")
    p.add_argument("output", help=".f32 (raw float32) or .csv")
    p.add_argument("--codebook", help="codebook JSON (default: <input>.codebook.json)")
    p.set_defaults(func=cmd_dequantize)

    for name, func, helptext in (
        ("simulate", cmd_simulate, "run one distributed SGD simulation"),
        ("compare", cmd_compare, "run several schemes on the same problem"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--config", help="INI config (see `config print-defaults`)")
        p.add_argument("--out")
        p.add_argument("--progress", action="store_true")
        if name == "simulate":
            p.add_argument("--scheme", choices=("dsgd", "qsgd", "nqsgd", "tqsgd", "tnqsgd", "tbqsgd"))
            p.add_argument("--bits", type=int)
        else:
            p.add_argument("--schemes", default="dsgd,tnqsgd,tqsgd,qsgd")
            p.add_argument("--bits", dest="bit_list", default="3", help="comma-separated bit widths")
            p.add_argument("--table", help="write the trade-off table CSV here")
            p.set_defaults(scheme=None, bits=None)
        p.set_defaults(func=func)

    p = sub.add_parser("verify", parents=[common], help="run oracle suites")
    p.add_argument("suites", nargs="+", choices=list(verify.SUITES) + ["all"])
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic power-law gradient dump")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2_000_000)
    p.add_argument("--gamma", type=float, default=4.0)
    p.add_argument("--g-min", type=float, default=0.01)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("config", parents=[common], help="config file helpers")
    p.add_argument("action", choices=("print-defaults", "show"))
    p.add_argument("file", nargs="?")
    p.set_defaults(func=cmd_config)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    if args.threads < 1:
        ap.error("--threads must be >= 1")
    if args.command == "config" and args.action == "show" and not args.file:
        ap.error("config show needs a FILE")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    man = Manifest(args, args.command)
    try:
        rc = args.func(args, man)
    except HTQError as exc:
        sys.stderr.write(json.dumps(dict(exc.to_json(), exit_code=exc.exit_code)) + "\n")
        return exc.exit_code
    except OSError as exc:
        sys.stderr.write(json.dumps({"error": "IOError", "message": str(exc), "exit_code": 3}) + "\n")
        return 3
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
