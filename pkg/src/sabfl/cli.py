"""Command-line entry point: ``sabfl run|batch|validate|report|convergence-check``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .analysis import TheoryConfig, mean_traces, quadratic_spec, run_oracle_training
from .chain import validate_chain_file
from .config import load_config, read_toml
from .harness import emit_report, load_matrix, run_batch
from .models import ConfigurationError
from .protocol import run_experiment

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

THEORY_KEYS = {"L", "delta", "M", "eps", "eps_tilde", "E", "K", "V", "R", "batch",
               "dim", "seeds", "seed", "checkpoints"}


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    report = run_experiment(cfg, args.out)
    s = report.summary()
    print(f"rounds={s['rounds']} stopped_at={s['stopped_at']} "
          f"final_accuracy={s['final_accuracy']:.4f} head={s['chain_head'][:16]}")
    return EXIT_FAIL if report.fault else EXIT_OK


def _cmd_batch(args) -> int:
    matrix = load_matrix(args.matrix)
    summaries = run_batch(matrix, args.out, seed=args.seed, jobs=args.jobs)
    print(f"{len(summaries)} runs written under {args.out}")
    return EXIT_FAIL if any(s.get("fault") for s in summaries) else EXIT_OK


def _cmd_validate(args) -> int:
    if not Path(args.chain).exists():
        raise FileNotFoundError(args.chain)
    result = validate_chain_file(args.chain)
    if result:
        print("ok")
        return EXIT_OK
    where = f" (round {result.round})" if result.round is not None else ""
    print(f"FAULT {result.code}{where}: {result.message}")
    return EXIT_FAIL


def _cmd_report(args) -> int:
    paths = emit_report(args.results_dir, args.out)
    for p in paths.values():
        print(p)
    return EXIT_OK


def theory_from_dict(raw):
    unknown = set(raw) - THEORY_KEYS
    if unknown:
        raise ConfigurationError(f"unknown key(s): {', '.join(sorted(unknown))}")
    batch = int(raw.get("batch", 1))
    cfg = TheoryConfig(
        L=float(raw.get("L", 1.0)), delta=float(raw.get("delta", 0.01)),
        M=float(raw.get("M", 0.1)), eps=float(raw.get("eps", 1e-3)),
        eps_tilde=float(raw.get("eps_tilde", 0.1)), batch_schedule=lambda r: batch,
        E=int(raw.get("E", 1)), K=int(raw.get("K", 5)), V=int(raw.get("V", 3)),
        R=int(raw.get("R", 1000)),
    )
    return cfg, int(raw.get("dim", 10)), int(raw.get("seeds", 20)), int(raw.get("seed", 0)), \
        [int(c) for c in raw.get("checkpoints", [10, 100, 1000])]


def _cmd_convergence(args) -> int:
    cfg, dim, n_seeds, seed, checkpoints = theory_from_dict(read_toml(args.config))
    if args.seed is not None:
        seed = args.seed
    spec = quadratic_spec(dim, seed)
    trace = mean_traces(run_oracle_training(spec, cfg, s) for s in range(seed, seed + n_seeds))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["r", "alpha", "grad_norm_sq", "cum_lhs", "rhs"])
        for r in range(cfg.R):
            w.writerow([r + 1, repr(float(trace.alpha[r])), repr(float(trace.grad_norm_sq[r])),
                        repr(float(trace.cum_lhs[r])), repr(float(trace.rhs[r]))])
    checks = {}
    for c in checkpoints:
        if 1 <= c <= cfg.R:
            checks[str(c)] = {"cum_lhs": float(trace.cum_lhs[c - 1]),
                              "rhs": float(trace.rhs[c - 1]),
                              "normalized": float(trace.normalized[c - 1]),
                              "holds": bool(trace.cum_lhs[c - 1] <= trace.rhs[c - 1])}
    passed = bool(np.all(trace.cum_lhs <= trace.rhs))
    summary = {"passed": passed, "seeds": n_seeds, "R": cfg.R, "checkpoints": checks}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"PASS: bound held at every R up to {cfg.R}" if passed else "FAIL: bound violated")
    return EXIT_OK if passed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sabfl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a config file")
    run.add_argument("config")
    run.add_argument("--out", default="run-out")
    run.add_argument("--seed", type=int)
    run.set_defaults(func=_cmd_run)

    batch = sub.add_parser("batch", help="run an experiment matrix and write reports")
    batch.add_argument("matrix")
    batch.add_argument("--out", default="batch-out")
    batch.add_argument("--seed", type=int)
    batch.add_argument("--jobs", type=int, default=1)
    batch.set_defaults(func=_cmd_batch)

    val = sub.add_parser("validate", help="validate a persisted chain")
    val.add_argument("chain")
    val.set_defaults(func=_cmd_validate)

    rep = sub.add_parser("report", help="build comparison tables from a results directory")
    rep.add_argument("results_dir")
    rep.add_argument("--out")
    rep.set_defaults(func=_cmd_report)

    conv = sub.add_parser("convergence-check", help="numerically check the convergence bound")
    conv.add_argument("config")
    conv.add_argument("--out", default="convergence-out")
    conv.add_argument("--seed", type=int)
    conv.set_defaults(func=_cmd_convergence)
    return p


def cli_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"sabfl: file not found: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"sabfl: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main():
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
