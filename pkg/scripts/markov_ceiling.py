"""How much NDCG@10 is there to win on the synthetic Markov log?

Ranks items for each test user with the generator's own transition matrix,
started from the user's last training item, and scores the ranking with the
same seen-filtered top-K evaluation the models get. A model that learned the
chain perfectly cannot do much better than this, which bounds the margin any
preset can have over another.

    python scripts/markov_ceiling.py --out markov_runs
"""

import argparse
from pathlib import Path

import numpy as np
import yaml

from seqrec.config import resolve
from seqrec.evaluation import ndcg_at_k, relevant_sets, seen_sets, top_k
from seqrec.pipeline import prepare
from seqrec.synthetic import markov_records, write_records_csv

HERE = Path(__file__).resolve().parent


def transition_matrix(n_items, jump_prob=0.1, steps=(1, 2, 3), step_probs=(0.6, 0.25, 0.15)):
    P = np.full((n_items, n_items), jump_prob / n_items)
    for s, p in zip(steps, step_probs):
        P[np.arange(n_items), (np.arange(n_items) + s) % n_items] += (1 - jump_prob) * p
    return P


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", default="markov_runs")
    ap.add_argument("--config", default=str(HERE / "configs" / "markov_desk.yaml"))
    ap.add_argument("--max-horizon", type=int, default=12)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = out / "markov.csv"
    write_records_csv(markov_records(seed=0), data)
    raw = yaml.safe_load(Path(args.config).read_text())
    raw["dataset"] = {"path": str(data.resolve())}
    split, _, _ = prepare(resolve(raw, "esasrec"), out)

    train = split.train
    # internal id -> generator item number ("i17" -> 17)
    number = np.array([int(name[1:]) for name in train.item_map])
    index = {n: i for i, n in enumerate(number)}
    P = transition_matrix(100)
    rel = relevant_sets(split.test)
    seen = seen_sets(train)
    last = {u: items[-1] for u, (items, _) in train.sequences().items()}

    best = (0.0, 0)
    for horizon in range(1, args.max_horizon + 1):
        reach = sum(np.linalg.matrix_power(P, s) for s in range(1, horizon + 1))
        recs = {}
        for u in rel:
            row = reach[number[last[u]]]
            scores = np.full(train.n_items, -np.inf)
            for n, i in index.items():
                scores[i] = row[n]
            recs[u] = top_k(scores, 10, seen[u])[0]
        value = ndcg_at_k(recs, rel, 10)
        print(f"horizon {horizon:2d}: NDCG@10 {value:.4f}")
        best = max(best, (value, horizon))
    print(f"best: NDCG@10 {best[0]:.4f} at horizon {best[1]} over {len(rel)} test users")


if __name__ == "__main__":
    main()
