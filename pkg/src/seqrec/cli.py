"""Command line entry point: ``seqrec prepare|train|evaluate|grid|report``.

Exit codes:

    0  success
    2  input data could not be read or parsed
    3  split failed (e.g. empty train or test side)
    4  bad configuration, unknown preset, empty grid
    5  training produced a non-finite loss
    6  evaluated runs were trained on different splits
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as D
from .config import PRESETS, ConfigError, load_config, load_raw, resolve
from .pipeline import (IncompatibleSplit, evaluate_runs, format_report, prepare, run_grid,
                       train_run)
from .trainer import TrainingDiverged

EXIT_INGEST = 2
EXIT_SPLIT = 3
EXIT_CONFIG = 4
EXIT_DIVERGED = 5
EXIT_INCOMPATIBLE = 6

log = logging.getLogger("seqrec")


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["train.seed"] = args.seed
    if getattr(args, "k", None):
        out["eval.k"] = list(args.k)
    return out


def _config(args):
    if args.config:
        return load_config(args.config, args.preset, _overrides(args))
    if args.preset:
        return resolve(None, args.preset, _overrides(args))
    raise ConfigError("need --config and/or --preset")


def cmd_prepare(args) -> int:
    cfg = _config(args)
    _, manifest, directory = prepare(cfg, args.out)
    print(f"split: {directory}")
    print(f"window_days: {manifest['window_days']}")
    for key, value in manifest["counts"].items():
        print(f"{key}: {value}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    directory, manifest = train_run(cfg, args.out)
    print(f"run: {directory}")
    print(f"best_epoch: {manifest['best_epoch']}  best_val_loss: {manifest['best_val_loss']:.6f}")
    return 0


def cmd_evaluate(args) -> int:
    ks, popular, capped, window = [10], False, False, 7
    if args.config:
        cfg = load_config(args.config)
        ks, popular = cfg.eval.k, cfg.eval.popular
        capped, window = cfg.eval.recall_capped, cfg.eval.popular_window_days
    if args.k:
        ks = list(args.k)
    popular = popular or args.popular
    report, directory = evaluate_runs(args.runs, args.out, ks, popular, capped, window)
    print(format_report(report))
    print(f"report: {directory}")
    return 0


def cmd_grid(args) -> int:
    if not args.config:
        raise ConfigError("grid needs --config with a 'grid' section")
    raw = load_raw(args.config)
    report, directory = run_grid(raw, args.out, args.preset,
                                 base_dir=Path(args.config).resolve().parent, seed=args.seed)
    print(format_report(report))
    print(f"report: {directory}")
    return 0


def cmd_report(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        grid = path / "grid_report.json"
        path = grid if grid.exists() else path / "report.json"
    report = json.loads(path.read_text())
    print(format_report(report, sort_by_ndcg=args.sort))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqrec", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--preset", help=f"one of: {', '.join(PRESETS)}")
        if seed:
            p.add_argument("--seed", type=int)
        p.add_argument("--out", default="runs", help="output root (default: runs)")

    p = sub.add_parser("prepare", help="ingest, filter and split a dataset")
    common(p, seed=False)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one configuration")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score trained runs on the test split")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--config", help="take eval settings from this config")
    p.add_argument("--k", type=int, nargs="+")
    p.add_argument("--popular", action="store_true", help="add the Popular-7-days baseline")
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grid", help="train every combination of the config's grid axes")
    common(p)
    p.add_argument("--k", type=int, nargs="+")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="print a saved report")
    p.add_argument("path", help="eval directory or report JSON")
    p.add_argument("--sort", action="store_true", help="order rows by NDCG")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except D.IngestError as exc:
        print(f"ingest error: {exc}", file=sys.stderr)
        return EXIT_INGEST
    except D.SplitError as exc:
        print(f"split error: {exc}", file=sys.stderr)
        return EXIT_SPLIT
    except TrainingDiverged as exc:
        where = exc.diagnostics.get("path", "(no run directory)")
        print(f"training diverged: {exc}; diagnostics: {where}", file=sys.stderr)
        return EXIT_DIVERGED
    except IncompatibleSplit as exc:
        print(f"incompatible split: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE


if __name__ == "__main__":
    sys.exit(main())
