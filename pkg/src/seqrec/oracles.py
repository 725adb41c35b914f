"""Slow brute-force references used to check the production paths.

Nothing here imports the production modules; everything runs in float64
with plain loops. Size limits keep accidental large calls from hanging.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

MAX_CATALOG = 1000
MAX_POINTS = 5000
MAX_RECORDS = 100_000

# central tolerance policy
GRAD_RTOL = 1e-4
GRAD_FLOOR = 1e-8
LOSS_ATOL = 1e-6
BLOCK_ATOL = 1e-5


class OracleLimitError(ValueError):
    pass


@dataclass
class OracleReport:
    case: str
    production: float
    oracle: float

    @property
    def abs_dev(self) -> float:
        return abs(self.production - self.oracle)

    @property
    def rel_dev(self) -> float:
        return self.abs_dev / max(abs(self.oracle), GRAD_FLOOR)

    def to_json(self) -> str:
        return json.dumps(dict(asdict(self), abs_dev=self.abs_dev, rel_dev=self.rel_dev))


def _limit(n: int, cap: int, what: str) -> None:
    if n > cap:
        raise OracleLimitError(f"{what} size {n} exceeds oracle limit {cap}")


# ---------------------------------------------------------------- numerics


def finite_diff_grad(f, x, h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f`` at every coordinate of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(f(x))
        flat[i] = old - h
        down = float(f(x))
        flat[i] = old
        gf[i] = (up - down) / (2.0 * h)
    return g


def full_softmax_ce(hidden, item_embeddings, target: int) -> float:
    """Cross-entropy of ``target`` under a softmax over every catalog item."""
    hidden = np.asarray(hidden, dtype=np.float64)
    emb = np.asarray(item_embeddings, dtype=np.float64)
    _limit(len(emb), MAX_CATALOG, "catalog")
    logits = [float(np.dot(hidden, e)) for e in emb]
    m = max(logits)
    z = sum(math.exp(s - m) for s in logits)
    return -(logits[target] - m - math.log(z))


def naive_bce(s_pos: float, s_negs) -> float:
    sig = lambda z: 1.0 / (1.0 + math.exp(-z))  # noqa: E731
    out = -math.log(sig(s_pos))
    for s in s_negs:
        out -= math.log(1.0 - sig(s))
    return out


def naive_sampled_softmax(s_pos: float, s_negs, log_q=None) -> float:
    adj = [s - (log_q[j] if log_q is not None else 0.0) for j, s in enumerate(s_negs)]
    allv = [s_pos] + adj
    m = max(allv)
    return -s_pos + m + math.log(sum(math.exp(v - m) for v in allv))


def matmul_loops(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


# ---------------------------------------------------------------- gated block


def _sigmoid(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-z))


def _layer_norm_vec(v, gain, bias, eps):
    mu = sum(v) / len(v)
    var = sum((x - mu) ** 2 for x in v) / len(v)
    return [(x - mu) / math.sqrt(var + eps) * g + b for x, g, b in zip(v, gain, bias)]


def _vecmat(v, w):
    return [sum(v[i] * w[i][j] for i in range(len(v))) for j in range(len(w[0]))]


def _attention(xs, w, n_heads, causal):
    """Straight-line multi-head self-attention over a list of token vectors."""
    length = len(xs)
    d = len(xs[0])
    dh = d // n_heads
    q = [_vecmat(x, w["wq"]) for x in xs]
    k = [_vecmat(x, w["wk"]) for x in xs]
    v = [_vecmat(x, w["wv"]) for x in xs]
    ctx = [[0.0] * d for _ in range(length)]
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        for i in range(length):
            allowed = range(i + 1) if causal else range(length)
            s = [sum(q[i][c] * k[j][c] for c in range(lo, hi)) / math.sqrt(dh) for j in allowed]
            m = max(s)
            e = [math.exp(x - m) for x in s]
            z = sum(e)
            for j, wgt in zip(allowed, e):
                for c in range(lo, hi):
                    ctx[i][c] += wgt / z * v[j][c]
    return [_vecmat(c, w["wo"]) for c in ctx]


def gated_block_reference(h, w: dict, n_heads: int, causal: bool = True, eps: float = 1e-8):
    """One gated pre-norm block on a single unpadded sequence ``h`` of shape (L, d).

    Each sublayer computes ``h + F(LN(h)) * sigmoid(h . w_gate)`` with F the
    attention or the SwiGLU feed-forward.
    """
    h = [[float(x) for x in row] for row in np.asarray(h)]
    w = {k: np.asarray(v, dtype=np.float64).tolist() for k, v in w.items()}

    normed = [_layer_norm_vec(x, w["ln_attn.gain"], w["ln_attn.bias"], eps) for x in h]
    f = _attention(normed, w, n_heads, causal)
    gate = [_sigmoid(sum(x[i] * w["gate_attn"][i][0] for i in range(len(x)))) for x in h]
    h = [[x + fi * g for x, fi in zip(row, frow)] for row, frow, g in zip(h, f, gate)]

    out = []
    for x in h:
        n = _layer_norm_vec(x, w["ln_ffn.gain"], w["ln_ffn.bias"], eps)
        a = _vecmat(n, w["ffn.w1"])
        b = _vecmat(n, w["ffn.w2"])
        inner = [ai * _sigmoid(ai) * bi for ai, bi in zip(a, b)]
        f2 = _vecmat(inner, w["ffn.w3"])
        g = _sigmoid(sum(x[i] * w["gate_ffn"][i][0] for i in range(len(x))))
        out.append([xi + fi * g for xi, fi in zip(x, f2)])
    return np.array(out)


# ---------------------------------------------------------------- ranking / sets


def brute_topk(scores, k: int, exclude=()) -> list[int]:
    _limit(len(scores), MAX_CATALOG * 100, "catalog")
    cand = [(-float(s), i) for i, s in enumerate(scores) if i not in set(exclude)]
    cand.sort()
    return [i for _, i in cand[:k]]


def brute_ndcg(recs: dict, relevant: dict, k: int) -> float:
    vals = []
    for u, rel in relevant.items():
        if not rel:
            continue
        lst = list(recs.get(u, []))[:k]
        dcg = 0.0
        for rank, it in enumerate(lst, start=1):
            if it in rel:
                dcg += 1.0 / math.log2(rank + 1)
        idcg = 0.0
        for rank in range(1, min(k, len(rel)) + 1):
            idcg += 1.0 / math.log2(rank + 1)
        vals.append(dcg / idcg)
    return sum(vals) / len(vals) if vals else 0.0


def brute_recall(recs: dict, relevant: dict, k: int) -> float:
    vals = []
    for u, rel in relevant.items():
        if not rel:
            continue
        found = 0
        for it in rel:
            if it in list(recs.get(u, []))[:k]:
                found += 1
        vals.append(found / len(rel))
    return sum(vals) / len(vals) if vals else 0.0


def brute_coverage(recs: dict, catalog_size: int, k: int) -> float:
    seen = []
    for lst in recs.values():
        for it in list(lst)[:k]:
            if it not in seen:
                seen.append(it)
    return len(seen) / catalog_size


def brute_pareto(points) -> list[bool]:
    pts = [tuple(map(float, p)) for p in points]
    _limit(len(pts), MAX_POINTS, "point set")
    flags = []
    for i, (a, b) in enumerate(pts):
        dominated = False
        for j, (c, d) in enumerate(pts):
            if j != i and c >= a and d >= b and (c > a or d > b):
                dominated = True
                break
        flags.append(not dominated)
    return flags


def brute_kcore(records, user_core: int, item_core: int) -> list[tuple]:
    """Repeated full passes until no record is dropped; returns surviving records."""
    recs = list(records)
    _limit(len(recs), MAX_RECORDS, "log")
    while True:
        changed = False
        icount: dict = {}
        for _, i, _t in recs:
            icount[i] = icount.get(i, 0) + 1
        kept = [r for r in recs if icount[r[1]] >= item_core]
        changed |= len(kept) != len(recs)
        ucount: dict = {}
        for u, _, _t in kept:
            ucount[u] = ucount.get(u, 0) + 1
        kept2 = [r for r in kept if ucount[r[0]] >= user_core]
        changed |= len(kept2) != len(kept)
        recs = kept2
        if not changed:
            return recs


def brute_temporal_split(records, window_days: int):
    """(train, test) record lists by direct timestamp filtering."""
    tmax = max(t for _, _, t in records)
    boundary = tmax - window_days * 86400
    train = [r for r in records if r[2] < boundary]
    users = {r[0] for r in train}
    items = {r[1] for r in train}
    test = [r for r in records if r[2] >= boundary and r[0] in users and r[1] in items]
    return train, test, boundary


def brute_loo(records) -> dict:
    """user -> (item, ts) of the max-timestamp record, later input rows winning ties."""
    best: dict = {}
    count: dict = {}
    for u, i, t in records:
        count[u] = count.get(u, 0) + 1
        if u not in best or t >= best[u][1]:
            best[u] = (i, t)
    return {u: v for u, v in best.items() if count[u] >= 2}


def nested_mean(per_instance: list[list[list[float]]]) -> float:
    """instances -> positions -> per-positive losses."""
    inst_means = []
    for positions in per_instance:
        pos_means = [sum(p) / len(p) for p in positions]
        inst_means.append(sum(pos_means) / len(pos_means))
    return sum(inst_means) / len(inst_means)


def interval_positives(items, timestamps, anchor: int, window_seconds: int) -> set:
    t = timestamps[anchor]
    return {items[j] for j in range(len(items)) if t < timestamps[j] <= t + window_seconds}
