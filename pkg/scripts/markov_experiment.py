"""Train presets on the synthetic Markov log and print the comparison table.

    python scripts/markov_experiment.py                      # esasrec vs sasrec_vanilla
    python scripts/markov_experiment.py esasrec sasrec_ss --out /tmp/markov
"""

import argparse
import logging
import time
from pathlib import Path

import yaml

from seqrec.config import resolve
from seqrec.pipeline import evaluate_runs, format_report, train_run
from seqrec.synthetic import markov_records, write_records_csv

HERE = Path(__file__).resolve().parent


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("presets", nargs="*", default=["esasrec", "sasrec_vanilla"])
    ap.add_argument("--out", default="markov_runs")
    ap.add_argument("--config", default=str(HERE / "configs" / "markov_desk.yaml"))
    ap.add_argument("--seed", type=int, default=0, help="data generator seed")
    ap.add_argument("--users", type=int, default=2000)
    ap.add_argument("--items", type=int, default=100)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = out / "markov.csv"
    write_records_csv(markov_records(args.users, args.items, seed=args.seed), data)
    raw = yaml.safe_load(Path(args.config).read_text())
    raw["dataset"] = {"path": str(data.resolve())}

    runs = []
    for preset in args.presets:
        t0 = time.perf_counter()
        rdir, manifest = train_run(resolve(raw, preset), out)
        print(f"{preset}: best epoch {manifest['best_epoch']} of {manifest['epochs_run']}, "
              f"{time.perf_counter() - t0:.0f}s -> {rdir}")
        runs.append(rdir)
    report, edir = evaluate_runs(runs, out, popular=True)
    print(format_report(report))
    print(f"report: {edir}")


if __name__ == "__main__":
    main()
