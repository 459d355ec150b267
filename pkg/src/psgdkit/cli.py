"""Command-line runner: deterministic experiments, CSV traces, verification.

Subcommands:
    run     execute one training run, write a CSV trace and a summary row
    sweep   execute several configurations with seed-offset repetitions
    verify  run a verification suite (gradcheck, fixedpoint, groups, inverses)

Every run writes ``<name>.csv`` with one comment header line recording the
full configuration, the column header
``iter,train_loss,grad_norm,precond_grad_norm,clipped,wall_ns``, and one raw
row per iteration. A ``summary.csv`` collects final/best losses per run;
loss smoothing (exponential moving average, factor 0.99) is applied only in
the summary, never to the trace. wall_ns is 0 unless --timing is given, so
identical invocations produce byte-identical files.

Step sizes, clipping and probe mode default per problem (see
PROBLEM_DEFAULTS); explicit flags always win, and a key=value config file can
supply any flag default (flags override the file). The output directory is
./runs, overridable by the PSGDKIT_OUT environment variable and the --out
flag.
"""

import argparse
import math
import os
import sys
import tempfile

import numpy as np

from .checkpoint import save_state
from .curvature import ProbeConfig
from .errors import PsgdkitError
from .optimizer import RunConfig, run
from .problems import make_addition_rnn, make_quadratic, make_rosenbrock, make_xor_mlp
from .verify import SUITES, run_suite

SMOOTHING = 0.99

# Per-problem defaults for flags not explicitly given (documented in README).
PROBLEM_DEFAULTS = {
    "quad": dict(mu=0.5, precond_mu=0.01, clip="none", probe="exact"),
    "rosenbrock": dict(mu=0.5, precond_mu=0.1, clip="1.0", probe="exact"),
    "xor-mlp": dict(mu=0.5, precond_mu=0.05, clip="auto", probe="exact"),
    "addition-rnn": dict(mu=0.1, precond_mu=0.01, clip="auto", probe="approx"),
}


def _build_problem(args):
    if args.problem == "quad":
        if args.quad_diag:
            diag = np.array([float(v) for v in args.quad_diag.split(",")])
        else:
            diag = np.array([k * (1 if k % 2 else -1) for k in range(1, args.dim + 1)],
                            dtype=float)
        return make_quadratic(np.diag(diag), noise_scale=args.noise,
                              batch_size=args.batch_size)
    if args.problem == "rosenbrock":
        return make_rosenbrock()
    if args.problem == "xor-mlp":
        return make_xor_mlp(args.hidden)
    if args.problem == "addition-rnn":
        return make_addition_rnn(args.seq_len, args.hidden, batch_size=args.batch_size)
    raise ValueError(f"unknown problem {args.problem!r}")


def _parse_damping(text):
    if text == "none":
        return "none", 0.0
    for prefix, kind in (("trad:", "traditional"), ("noncvx:", "nonconvex")):
        if text.startswith(prefix):
            return kind, float(text[len(prefix):])
    raise ValueError(f"damping must be none, trad:LAMBDA or noncvx:LAMBDA, got {text!r}")


def _resolve_clip(clip_text, problem):
    if clip_text == "none":
        return None
    if clip_text == "auto":
        return 10.0 * math.sqrt(problem.dim)
    return float(clip_text)


def _make_config(args, problem, seed):
    defaults = PROBLEM_DEFAULTS[args.problem]
    mu = args.mu if args.mu is not None else defaults["mu"]
    precond_mu = args.precond_mu if args.precond_mu is not None else defaults["precond_mu"]
    clip_text = args.clip if args.clip is not None else defaults["clip"]
    probe_mode = args.probe if args.probe is not None else defaults["probe"]
    kind, lam = _parse_damping(args.damping)
    mode = "approximate" if probe_mode == "approx" else "exact"
    return RunConfig(
        method=args.method,
        precond_variant=args.precond,
        splu_order=args.splu_order,
        per_block=args.per_block,
        mu=mu,
        precond_mu=precond_mu,
        clip_omega=_resolve_clip(clip_text, problem),
        probe=ProbeConfig(mode=mode, damping=kind, damping_lambda=lam),
        skip_schedule=args.skip,
        iters=args.iters,
        batch_size=args.batch_size,
        seed=seed,
    )


def _run_name(args, cfg):
    if args.name:
        return args.name
    bits = [args.problem, cfg.method]
    if cfg.method in ("psgd",):
        bits.append(cfg.precond_variant)
    bits.append(f"mu{cfg.mu:g}")
    bits.append(f"seed{cfg.seed}")
    return "-".join(bits)


def _config_header(args, cfg):
    fields = {
        "problem": args.problem,
        "method": cfg.method,
        "precond": cfg.precond_variant if cfg.method == "psgd" else "-",
        "mu": cfg.mu,
        "precond_mu": cfg.precond_mu,
        "clip": "none" if cfg.clip_omega is None else f"{cfg.clip_omega:g}",
        "probe": cfg.probe.mode,
        "probe_std": f"{cfg.probe.sample_std:g}",
        "damping": cfg.probe.damping,
        "damping_lambda": f"{cfg.probe.damping_lambda:g}",
        "skip": cfg.skip_schedule,
        "splu_order": cfg.splu_order,
        "per_block": int(cfg.per_block),
        "iters": cfg.iters,
        "batch_size": cfg.batch_size,
        "seed": cfg.seed,
        "rmsprop_beta": cfg.rmsprop_beta,
        "rmsprop_eps": cfg.rmsprop_eps,
        "smoothing": SMOOTHING,
    }
    if args.problem == "quad":
        fields["dim"] = args.dim
        fields["quad_diag"] = args.quad_diag or "alternating"
        fields["noise"] = args.noise
    elif args.problem in ("xor-mlp", "addition-rnn"):
        fields["hidden"] = args.hidden
        if args.problem == "addition-rnn":
            fields["seq_len"] = args.seq_len
    return "# psgdkit " + " ".join(f"{k}={v}" for k, v in fields.items())


def _atomic_write(path, text):
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_trace(path, header, rows):
    lines = [header, "iter,train_loss,grad_norm,precond_grad_norm,clipped,wall_ns"]
    for r in rows:
        lines.append(f"{r.iter},{float(r.train_loss)!r},{float(r.grad_norm)!r},"
                     f"{float(r.precond_grad_norm)!r},{int(r.clipped)},{int(r.wall_ns)}")
    _atomic_write(path, "\n".join(lines) + "\n")


def _smoothed_final(losses):
    s = None
    for value in losses:
        if not math.isfinite(value):
            break
        s = value if s is None else SMOOTHING * s + (1.0 - SMOOTHING) * value
    return float("nan") if s is None else s


def _summarize(name, args, cfg, result):
    losses = [r.train_loss for r in result.rows]
    finite = [v for v in losses if math.isfinite(v)]
    return {
        "name": name,
        "problem": args.problem,
        "method": cfg.method,
        "precond": cfg.precond_variant if cfg.method == "psgd" else "-",
        "mu": f"{cfg.mu:g}",
        "seed": cfg.seed,
        "iters_run": len(result.rows),
        "final_loss": repr(float(losses[-1])) if losses else "nan",
        "best_loss": repr(float(min(finite))) if finite else "nan",
        "final_loss_smoothed": repr(_smoothed_final(losses)),
        "diverged": int(result.diverged),
    }


_SUMMARY_COLUMNS = ["name", "problem", "method", "precond", "mu", "seed", "iters_run",
                    "final_loss", "best_loss", "final_loss_smoothed", "diverged"]


def _write_summary(path, entries):
    lines = [",".join(_SUMMARY_COLUMNS)]
    for e in entries:
        lines.append(",".join(str(e[c]) for c in _SUMMARY_COLUMNS))
    _atomic_write(path, "\n".join(lines) + "\n")


def _execute_run(args, seed, out_dir):
    problem = _build_problem(args)
    cfg = _make_config(args, problem, seed)
    result = run(problem, cfg, timing=args.timing)
    name = _run_name(args, cfg)
    _write_trace(os.path.join(out_dir, name + ".csv"), _config_header(args, cfg), result.rows)
    if args.save_precond and cfg.method == "psgd":
        save_state(result.state, args.save_precond)
    return name, cfg, result


def _out_dir(args):
    out = args.out or os.environ.get("PSGDKIT_OUT") or "runs"
    os.makedirs(out, exist_ok=True)
    return out


def _add_run_flags(p):
    p.add_argument("--problem", required=True,
                   choices=["quad", "rosenbrock", "xor-mlp", "addition-rnn"])
    p.add_argument("--dim", type=int, default=10, help="quadratic dimension")
    p.add_argument("--quad-diag", default=None, metavar="D1,D2,...",
                   help="explicit quadratic Hessian diagonal (default: alternating "
                        "+1,-2,...,+-dim)")
    p.add_argument("--noise", type=float, default=0.0, help="quadratic gradient noise scale")
    p.add_argument("--hidden", type=int, default=4, help="hidden units (xor-mlp, addition-rnn)")
    p.add_argument("--seq-len", type=int, default=8, help="sequence length (addition-rnn)")
    p.add_argument("--method", default="psgd", choices=["psgd", "sgd", "rmsprop", "esgd"])
    p.add_argument("--precond", default="dense",
                   choices=["dense", "diag", "splu", "kron", "scan"])
    p.add_argument("--splu-order", type=int, default=10,
                   help="sparse-LU order r (clamped to the problem dimension)")
    p.add_argument("--per-block", action="store_true",
                   help="one dense/diag/splu block per tensor instead of whole-theta")
    p.add_argument("--mu", type=float, default=None,
                   help="step size (default per problem)")
    p.add_argument("--precond-mu", type=float, default=None,
                   help="preconditioner step size (default 0.01; 0.1 for rosenbrock, "
                        "0.05 for xor-mlp)")
    p.add_argument("--probe", default=None, choices=["approx", "exact"],
                   help="Hessian-vector probe mode (default per problem)")
    p.add_argument("--clip", default=None,
                   help="preconditioned gradient clip threshold: none, auto "
                        "(10*sqrt(dim)) or a number (default per problem)")
    p.add_argument("--skip", default="never", choices=["never", "log10"],
                   help="preconditioner update-skipping schedule")
    p.add_argument("--damping", default="none",
                   help="probe damping: none, trad:LAMBDA or noncvx:LAMBDA")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output directory (env PSGDKIT_OUT)")
    p.add_argument("--name", default=None, help="override the run name")
    p.add_argument("--timing", action="store_true",
                   help="record real wall_ns (breaks byte-identical traces)")
    p.add_argument("--save-precond", default=None, metavar="PATH",
                   help="write the final preconditioner state to PATH")


def _apply_config_file(argv, parser):
    """key=value file provides flag defaults; explicit flags override."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default=None)
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return
    defaults = {}
    with open(known.config) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {line!r}")
            key, value = line.split("=", 1)
            defaults[key.strip().replace("-", "_")] = value.strip()
    valid = {a.dest for a in parser._actions}
    unknown = set(defaults) - valid
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    typed = {}
    for action in parser._actions:
        if action.dest in defaults:
            raw = defaults[action.dest]
            if action.type is not None:
                typed[action.dest] = action.type(raw)
            elif isinstance(action.default, bool) or action.const is True:
                typed[action.dest] = raw.lower() in ("1", "true", "yes")
            else:
                typed[action.dest] = raw
    parser.set_defaults(**typed)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = argparse.ArgumentParser(
        prog="psgdkit",
        description="Preconditioned SGD benchmark runner (deterministic, CSV traces).")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one training run")
    _add_run_flags(p_run)
    p_run.add_argument("--config", default=None, help="key=value flag defaults file")

    p_sweep = sub.add_parser("sweep", help="execute several runs with seed offsets")
    _add_run_flags(p_sweep)
    p_sweep.add_argument("--config", default=None, help="key=value flag defaults file")
    p_sweep.add_argument("--run", action="append", default=None, metavar="SPEC",
                         dest="specs",
                         help="method[:variant[:mu]] (repeatable); defaults to the "
                              "flag-level method/variant/mu")
    p_sweep.add_argument("--reps", type=int, default=1,
                         help="repetitions per spec with seed offsets")

    p_verify = sub.add_parser("verify", help="run a verification suite")
    p_verify.add_argument("suite", choices=sorted(SUITES) + ["all"])

    if argv and argv[0] in ("run", "sweep"):
        try:
            _apply_config_file(argv[1:], p_run if argv[0] == "run" else p_sweep)
        except (OSError, ValueError) as exc:
            parser.exit(2, f"psgdkit: config error: {exc}\n")

    args = parser.parse_args(argv)
    return _dispatch(parser, args)


def _dispatch(parser, args) -> int:
    if args.command == "verify":
        results = run_suite(args.suite)
        failed = 0
        for r in results:
            status = "PASS" if r.ok else "FAIL"
            if not r.ok:
                failed += 1
            print(f"{status} {r.name}: measured {r.measured:.6g} vs tolerance {r.tolerance:.6g}")
        print(f"{len(results) - failed}/{len(results)} checks passed")
        return 1 if failed else 0

    out_dir = _out_dir(args)
    entries = []
    try:
        if args.command == "run":
            name, cfg, result = _execute_run(args, args.seed, out_dir)
            entries.append(_summarize(name, args, cfg, result))
        else:
            specs = args.specs or [None]
            for spec in specs:
                spec_args = argparse.Namespace(**vars(args))
                spec_args.name = None  # repetitions need distinct names
                if spec:
                    parts = spec.split(":")
                    spec_args.method = parts[0]
                    if len(parts) > 1 and parts[1]:
                        spec_args.precond = parts[1]
                    if len(parts) > 2 and parts[2]:
                        spec_args.mu = float(parts[2])
                for rep in range(args.reps):
                    name, cfg, result = _execute_run(spec_args, args.seed + rep, out_dir)
                    entries.append(_summarize(name, spec_args, cfg, result))
    except PsgdkitError as exc:
        parser.exit(2, f"psgdkit: {exc}\n")
    except ValueError as exc:
        parser.exit(2, f"psgdkit: {exc}\n")

    _write_summary(os.path.join(out_dir, "summary.csv"), entries)
    for e in entries:
        print(f"{e['name']}: final_loss={e['final_loss']} best_loss={e['best_loss']} "
              f"diverged={e['diverged']}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
