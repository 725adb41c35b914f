"""Synthetic timestamped logs with first-order Markov item transitions."""

from __future__ import annotations

import csv

import numpy as np

from .data import DAY, InteractionLog, from_records


def markov_records(n_users: int = 2000, n_items: int = 100, seed: int = 0,
                   min_len: int = 8, max_len: int = 40, jump_prob: float = 0.1,
                   steps=(1, 2, 3), step_probs=(0.6, 0.25, 0.15),
                   span_days: int = 600) -> list[tuple]:
    """Each user walks item ``i -> (i + s) mod n_items`` with a small chance of a uniform jump.

    A user's event times are sorted uniform draws over the whole ``span_days``
    period, so any trailing window holds a proportional share of every user's
    activity.
    """
    rng = np.random.default_rng(seed)
    records = []
    for u in range(n_users):
        length = int(rng.integers(min_len, max_len + 1))
        times = np.sort(rng.integers(0, span_days * DAY, size=length))
        item = int(rng.integers(n_items))
        for t in times:
            records.append((f"u{u}", f"i{item}", int(t)))
            if rng.random() < jump_prob:
                item = int(rng.integers(n_items))
            else:
                item = (item + int(rng.choice(steps, p=step_probs))) % n_items
    return records


def markov_log(**kwargs) -> InteractionLog:
    return from_records(markov_records(**kwargs))


def write_records_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "item_id", "timestamp"])
        w.writerows(records)
