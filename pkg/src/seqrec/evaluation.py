"""Top-K recommendation, NDCG / Recall / Coverage, Popular baseline and Pareto flags.

Item ids in this module are internal (zero-based) ids.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import DAY, InteractionLog
from .model import ModelParams, encode, pad_sequences, score

log = logging.getLogger(__name__)


@dataclass
class RecList:
    items: dict[int, np.ndarray]
    scores: dict[int, np.ndarray] = field(default_factory=dict)
    short_users: list[int] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user", "rank", "item", "score"])
            for u in sorted(self.items):
                sc = self.scores.get(u)
                for r, it in enumerate(self.items[u]):
                    w.writerow([u, r + 1, int(it), "" if sc is None else repr(float(sc[r]))])


def top_k(logits: np.ndarray, k: int, exclude=()) -> tuple[np.ndarray, np.ndarray]:
    """Highest ``k`` columns of a 1-D score vector; equal scores go to the smaller id."""
    s = np.asarray(logits, dtype=np.float64).copy()
    banned = np.zeros(len(s), dtype=bool)
    banned[np.asarray(list(exclude), dtype=np.int64)] = True
    order = np.argsort(-s, kind="stable")
    order = order[~banned[order]][:k]
    return order, s[order]


def relevant_sets(test: InteractionLog) -> dict[int, set[int]]:
    out: dict[int, set[int]] = {}
    for u, i in zip(test.users.tolist(), test.items.tolist()):
        out.setdefault(u, set()).add(i)
    return out


def seen_sets(train: InteractionLog) -> dict[int, set[int]]:
    return relevant_sets(train)


def recommend(params: ModelParams, train: InteractionLog, users, k: int = 10,
              batch_size: int = 256) -> RecList:
    """Score the catalog from each user's last position and mask seen items."""
    seqs = train.sequences()
    seen = seen_sets(train)
    L = params.arch.max_len
    mask_token = params.mask_token
    users = [int(u) for u in users]
    recs = RecList({}, {})
    for start in range(0, len(users), batch_size):
        chunk = users[start:start + batch_size]
        histories = []
        for u in chunk:
            toks = seqs[u][0] + 1 if u in seqs else np.zeros(0, dtype=np.int64)
            if mask_token is not None:
                toks = np.r_[toks[-(L - 1):] if L > 1 else toks[:0], mask_token]
            histories.append(toks)
        ids = pad_sequences(histories, L)
        hidden = encode(ids, params, training=False).hidden.data[:, -1, :]
        logits = score(T.Tensor(hidden), params).data
        for row, u in enumerate(chunk):
            excl = seen.get(u, set())
            items, sc = top_k(logits[row], k, excl)
            if len(items) < k:
                recs.short_users.append(u)
            recs.items[u] = items
            recs.scores[u] = sc
    return recs


def popular_baseline(train: InteractionLog, users, k: int = 10, window_days: int = 7) -> RecList:
    """Most interacted items in the last ``window_days`` of training, seen items removed."""
    boundary = train.timestamps.max() - window_days * DAY
    recent = train.timestamps >= boundary
    if not recent.any():
        log.warning("popular baseline: empty window, using all-time counts")
        recent = np.ones(len(train), dtype=bool)
    counts = np.bincount(train.items[recent], minlength=train.n_items).astype(np.float64)
    seen = seen_sets(train)
    recs = RecList({}, {})
    for u in users:
        u = int(u)
        items, sc = top_k(counts, k, seen.get(u, set()))
        if len(items) < k:
            recs.short_users.append(u)
        recs.items[u] = items
        recs.scores[u] = sc
    return recs


# ---------------------------------------------------------------- metrics


def _user_ndcg(recs, relevant, k) -> float:
    dcg = sum(1.0 / np.log2(r + 2) for r, it in enumerate(list(recs)[:k]) if it in relevant)
    idcg = sum(1.0 / np.log2(r + 2) for r in range(min(k, len(relevant))))
    return dcg / idcg


def ndcg_at_k(recs: dict, relevant: dict, k: int = 10) -> float:
    """Binary-relevance NDCG averaged over users with a non-empty relevant set."""
    if k < 1:
        raise ValueError("k must be >= 1")
    vals = [_user_ndcg(recs.get(u, ()), rel, k) for u, rel in relevant.items() if rel]
    return float(np.mean(vals)) if vals else 0.0


def recall_at_k(recs: dict, relevant: dict, k: int = 10, capped: bool = False) -> float:
    """Hits in the top-K over |relevant| (or min(K, |relevant|) when ``capped``)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    vals = []
    for u, rel in relevant.items():
        if not rel:
            continue
        hits = len(set(list(recs.get(u, ()))[:k]) & set(rel))
        vals.append(hits / (min(k, len(rel)) if capped else len(rel)))
    return float(np.mean(vals)) if vals else 0.0


def coverage_at_k(recs: dict, catalog_size: int, k: int = 10) -> float:
    if not recs:
        raise ValueError("coverage needs at least one user")
    distinct = set()
    for items in recs.values():
        distinct.update(int(i) for i in list(items)[:k])
    return len(distinct) / catalog_size


def pareto_front(points) -> list[bool]:
    """Flag points not weakly dominated (>= on both axes, > on one) by another point."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("pareto_front needs at least one point")
    ge = (pts[None, :, 0] >= pts[:, None, 0]) & (pts[None, :, 1] >= pts[:, None, 1])
    gt = (pts[None, :, 0] > pts[:, None, 0]) | (pts[None, :, 1] > pts[:, None, 1])
    dominated = (ge & gt).any(axis=1)
    return (~dominated).tolist()


@dataclass
class ModelMetrics:
    name: str
    ndcg: float
    recall: float
    coverage: float
    pareto: bool = False
    meta: dict = field(default_factory=dict)


def evaluate_recs(name: str, recs: RecList, test: InteractionLog, catalog_size: int,
                  k: int = 10, recall_capped: bool = False) -> ModelMetrics:
    rel = relevant_sets(test)
    return ModelMetrics(name, ndcg_at_k(recs.items, rel, k),
                        recall_at_k(recs.items, rel, k, recall_capped),
                        coverage_at_k(recs.items, catalog_size, k))


def mark_pareto(rows: list[ModelMetrics]) -> list[ModelMetrics]:
    flags = pareto_front([(r.ndcg, r.coverage) for r in rows])
    for r, f in zip(rows, flags):
        r.pareto = bool(f)
    return rows
