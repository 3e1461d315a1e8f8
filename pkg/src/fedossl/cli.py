"""Command line: ``fedossl run | sweep | compare``.

Exit status 0 on success, 1 for configuration or input errors, 2 for anything
that goes wrong while running.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness
from .config import ExperimentConfig, apply_preset, load_config
from .data import IngestionError
from .numerics import ConfigurationError
from .objective import DataError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "preset", None):
        cfg = apply_preset(cfg, args.preset)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _run(args) -> int:
    cfg = _load(args)
    if args.out:
        out = Path(args.out)
    elif cfg.output_dir:
        out = Path(cfg.output_dir)
    else:
        out = harness.output_root() / f"{cfg.preset}_seed{cfg.seed}"
    result = harness.run_to_directory(cfg, out)
    best = result.best
    if best is not None:
        au = "-" if best.acc_au is None else f"{best.acc_au:.4f}"
        print(f"best round {result.best_index + 1}: acc_all {best.acc_all:.4f}  acc_au {au}")
    print(f"wrote {out}")
    return EXIT_OK


def _sweep(args) -> int:
    cfg = _load(args)
    values = [harness.parse_value(v) for v in args.values.split(",")]
    root = harness.output_root(args.out) / f"sweep_{args.param}"
    for d in harness.sweep(cfg, args.param, values, root):
        print(f"wrote {d}")
    return EXIT_OK


def _compare(args) -> int:
    out = args.out if args.out else harness.output_root() / "compare"
    print(harness.compare(args.dirs, out), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedossl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment into a directory")
    run.add_argument("--config", help="JSON config (defaults when omitted)")
    run.add_argument("--preset", help="ablation preset: full, minus_R, minus_R_minus_ce, base")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help=f"run directory (default ${harness.OUTPUT_ENV}/<preset>_seed<N>)")
    run.set_defaults(func=_run)

    sw = sub.add_parser("sweep", help="one run per value of a dotted config key")
    sw.add_argument("--config")
    sw.add_argument("--param", required=True, help="dotted key, e.g. objective.beta")
    sw.add_argument("--values", required=True, help="comma-separated JSON values, e.g. 0.1,0.5,1,2")
    sw.add_argument("--preset")
    sw.add_argument("--seed", type=int)
    sw.add_argument("--out", help="output root")
    sw.set_defaults(func=_sweep)

    cmp_ = sub.add_parser("compare", help="tabulate finished run directories")
    cmp_.add_argument("dirs", nargs="+")
    cmp_.add_argument("--out", help="where to write comparison and plot-data files")
    cmp_.set_defaults(func=_compare)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors; here a bad command line is a config error
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigurationError, IngestionError, DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure mid-run maps to one status
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
