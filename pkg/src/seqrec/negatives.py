"""Uniform, in-batch and mixed negative samplers with optional logQ terms.

Ids here are zero-based catalog indices. Each row of a draw belongs to one
target position and excludes that position's positive set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ContractError

KINDS = ("uniform", "in_batch", "mixed")


@dataclass
class SamplerConfig:
    kind: str = "uniform"
    n_negatives: int = 256
    ratio: float = 0.6  # in-batch share for "mixed"
    logq: bool = False
    logq_source: str = "batch"  # "batch" or "global" item frequencies for in-batch q
    replacement: bool = True

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"sampler kind must be one of {KINDS}, got {self.kind!r}")
        if self.n_negatives < 1:
            raise ValueError("n_negatives must be >= 1")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("mixed ratio must be in [0, 1]")
        if self.logq_source not in ("batch", "global"):
            raise ValueError("logq_source must be 'batch' or 'global'")


@dataclass
class NegativeDraw:
    ids: np.ndarray  # (N, k)
    log_q: np.ndarray | None  # (N, k) natural-log sampling probabilities
    in_batch: np.ndarray  # (N, k) bool, which draws came from the batch pool
    n_fallback: int = 0


def _padded(exclusions, n_rows: int) -> np.ndarray:
    if exclusions is None:
        return np.full((n_rows, 1), -1, dtype=np.int64)
    lens = [len(e) for e in exclusions]
    width = max(lens + [1])
    out = np.full((n_rows, width), -1, dtype=np.int64)
    for r, e in enumerate(exclusions):
        if lens[r] == 1:
            out[r, 0] = next(iter(e))
        elif lens[r]:
            e = np.unique(np.asarray(list(e), dtype=np.int64))
            out[r, :len(e)] = e
    return out


def _collides(draws: np.ndarray, excl: np.ndarray) -> np.ndarray:
    return (draws[:, :, None] == excl[:, None, :]).any(-1)


def sample_uniform(catalog_size: int, k: int, exclusions=None, seed=0, *,
                   n_rows: int | None = None, logq: bool = False,
                   replacement: bool = True) -> NegativeDraw:
    """Uniform over ``range(catalog_size)`` minus each row's exclusions."""
    rng = np.random.default_rng(seed)
    rows = len(exclusions) if exclusions is not None else (n_rows or 1)
    excl = _padded(exclusions, rows)
    n_excl = (excl >= 0).sum(1)
    available = catalog_size - n_excl
    if (available <= 0).any():
        raise ContractError("exclusions cover the whole catalog")
    if not replacement:
        if (available < k).any():
            raise ContractError(f"cannot draw {k} distinct negatives from "
                                f"{available.min()} eligible items")
        ids = np.empty((rows, k), dtype=np.int64)
        for r in range(rows):
            eligible = np.setdiff1d(np.arange(catalog_size), excl[r][excl[r] >= 0])
            ids[r] = rng.choice(eligible, size=k, replace=False)
    else:
        ids = rng.integers(0, catalog_size, size=(rows, k))
        bad = _collides(ids, excl)
        while bad.any():
            ids[bad] = rng.integers(0, catalog_size, size=int(bad.sum()))
            bad = _collides(ids, excl)
    log_q = None
    if logq:
        log_q = np.repeat(-np.log(available.astype(np.float64))[:, None], k, axis=1)
    return NegativeDraw(ids, log_q, np.zeros((rows, k), dtype=bool))


def sample_in_batch(pool, k: int, exclusions, seed=0, *, catalog_size: int | None = None,
                    logq: bool = False, global_freq: np.ndarray | None = None,
                    max_rounds: int = 32) -> NegativeDraw:
    """Uniform over the multiset ``pool`` minus each row's exclusions.

    Popular items are drawn proportionally to their batch count. Rows whose
    eligible pool is empty fall back to uniform catalog sampling.
    """
    rng = np.random.default_rng(seed)
    pool = np.asarray(pool, dtype=np.int64)
    rows = len(exclusions)
    excl = _padded(exclusions, rows)
    size = max(int(pool.max()) + 1 if len(pool) else 0, int(excl.max()) + 1, catalog_size or 0)
    counts = np.bincount(pool, minlength=size).astype(np.float64)
    excl_mass = np.where(excl >= 0, counts[np.clip(excl, 0, None)], 0.0).sum(1)
    eligible = len(pool) - excl_mass
    ok = eligible > 0
    ids = np.zeros((rows, k), dtype=np.int64)
    in_batch = np.zeros((rows, k), dtype=bool)
    if len(pool) and ok.any():
        sub = np.flatnonzero(ok)
        draws = pool[rng.integers(0, len(pool), size=(len(sub), k))]
        sub_excl = excl[sub]
        bad = _collides(draws, sub_excl)
        rounds = 0
        while bad.any() and rounds < max_rounds:
            draws[bad] = pool[rng.integers(0, len(pool), size=int(bad.sum()))]
            bad = _collides(draws, sub_excl)
            rounds += 1
        for r in np.flatnonzero(bad.any(1)):
            # heavy exclusion mass: draw from the explicit eligible multiset
            cand = pool[~np.isin(pool, sub_excl[r])]
            draws[r] = cand[rng.integers(0, len(cand), size=k)]
        ids[sub] = draws
        in_batch[sub] = True
    log_q = None
    if logq:
        if global_freq is not None:
            freq = np.asarray(global_freq, dtype=np.float64)
            log_q = np.log(freq[ids] / freq.sum())
        else:
            log_q = np.zeros((rows, k))
            log_q[ok] = np.log(counts[ids[ok]] / eligible[ok, None])
    n_fallback = int((~ok).sum())
    if n_fallback:
        if catalog_size is None:
            raise ContractError("empty eligible pool and no catalog size for fallback")
        fb_rows = np.flatnonzero(~ok)
        fb = sample_uniform(catalog_size, k, [exclusions[r] for r in fb_rows],
                            seed=int(rng.integers(1 << 62)),
                            logq=logq)
        ids[fb_rows] = fb.ids
        if logq:
            log_q[fb_rows] = fb.log_q
    return NegativeDraw(ids, log_q, in_batch, n_fallback)


def n_in_batch(ratio: float, k: int) -> int:
    """Half-up rounding of ``ratio * k``."""
    return int(math.floor(ratio * k + 0.5))


def sample_mixed(ratio: float, k: int, pool, exclusions, catalog_size: int, seed=0, *,
                 logq: bool = False, global_freq: np.ndarray | None = None) -> NegativeDraw:
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must be in [0, 1]")
    k_in = n_in_batch(ratio, k)
    parts = []
    seeds = np.random.default_rng(seed).integers(1 << 62, size=2).tolist()
    if k_in:
        parts.append(sample_in_batch(pool, k_in, exclusions, seeds[0], catalog_size=catalog_size,
                                     logq=logq, global_freq=global_freq))
    if k - k_in:
        parts.append(sample_uniform(catalog_size, k - k_in, exclusions, seeds[1], logq=logq))
    ids = np.concatenate([p.ids for p in parts], axis=1)
    in_batch = np.concatenate([p.in_batch for p in parts], axis=1)
    log_q = np.concatenate([p.log_q for p in parts], axis=1) if logq else None
    return NegativeDraw(ids, log_q, in_batch, sum(p.n_fallback for p in parts))


def sample(cfg: SamplerConfig, catalog_size: int, exclusions, pool=None, seed=0,
           global_freq: np.ndarray | None = None) -> NegativeDraw:
    """Dispatch on ``cfg.kind``; ``pool`` is the batch positive multiset."""
    freq = global_freq if cfg.logq_source == "global" else None
    if cfg.kind == "uniform":
        return sample_uniform(catalog_size, cfg.n_negatives, exclusions, seed,
                              logq=cfg.logq, replacement=cfg.replacement)
    if pool is None:
        raise ContractError(f"{cfg.kind} sampling needs the batch positive pool")
    if cfg.kind == "in_batch":
        return sample_in_batch(pool, cfg.n_negatives, exclusions, seed,
                               catalog_size=catalog_size, logq=cfg.logq, global_freq=freq)
    return sample_mixed(cfg.ratio, cfg.n_negatives, pool, exclusions, catalog_size, seed,
                        logq=cfg.logq, global_freq=freq)
