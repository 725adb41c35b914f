"""Training objectives: turn one user's timestamped sequence into model inputs and targets.

Builders return ``None`` when a user cannot produce an instance (too short,
empty window side, ...); callers skip those users.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DAY
from .model import pad_sequences

KINDS = ("shifted_sequence", "mlm", "next_action", "all_action", "dense_all_action")


@dataclass
class ObjectiveConfig:
    kind: str = "shifted_sequence"
    mask_prob: float = 0.2
    window_days: int = 7
    n_anchors: int = 8

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"objective kind must be one of {KINDS}, got {self.kind!r}")
        if not 0.0 < self.mask_prob <= 1.0:
            raise ValueError("mask_prob must be in (0, 1]")
        if self.window_days < 1 or self.n_anchors < 1:
            raise ValueError("window_days and n_anchors must be >= 1")

    @property
    def attention_mode(self) -> str:
        return "bidirectional" if self.kind == "mlm" else "causal"


@dataclass
class TrainingInstance:
    input_ids: np.ndarray  # (L,) left-padded
    targets: list[tuple[int, np.ndarray]]  # (position, positive ids)
    attention_mode: str = "causal"

    @property
    def n_targets(self) -> int:
        return len(self.targets)


def _instance(inputs, targets_by_offset, max_len, mode) -> TrainingInstance:
    """``targets_by_offset`` indexes into ``inputs`` before padding/truncation."""
    inputs = np.asarray(inputs, dtype=np.int64)
    ids = pad_sequences([inputs], max_len)[0]
    shift = max_len - len(inputs)
    targets = [(off + shift, np.asarray(pos, dtype=np.int64))
               for off, pos in targets_by_offset if off + shift >= 0]
    return TrainingInstance(ids, targets, mode)


def build_shifted_sequence(items, max_len: int) -> TrainingInstance | None:
    items = np.asarray(items)
    if len(items) < 2:
        return None
    inputs = items[:-1][-max_len:]
    nexts = items[1:][-max_len:]
    return _instance(inputs, [(p, nexts[p:p + 1]) for p in range(len(inputs))], max_len, "causal")


def build_mlm(items, max_len: int, mask_token: int, mask_prob: float = 0.2,
              seed=0) -> TrainingInstance | None:
    items = np.asarray(items)[-max_len:]
    if len(items) < 1:
        return None
    rng = np.random.default_rng(seed)
    masked = rng.random(len(items)) < mask_prob
    if not masked.any():
        masked[rng.integers(len(items))] = True
    inputs = np.where(masked, mask_token, items)
    targets = [(p, items[p:p + 1]) for p in np.flatnonzero(masked)]
    return _instance(inputs, targets, max_len, "bidirectional")


def build_next_action(items, max_len: int) -> TrainingInstance | None:
    items = np.asarray(items)
    if len(items) < 2:
        return None
    inputs = items[:-1][-max_len:]
    return _instance(inputs, [(len(inputs) - 1, items[-1:])], max_len, "causal")


def build_all_action(items, timestamps, max_len: int, window_days: int) -> TrainingInstance | None:
    items, ts = np.asarray(items), np.asarray(timestamps)
    if len(items) == 0:
        return None
    boundary = ts.max() - window_days * DAY
    before = ts < boundary
    if not before.any() or before.all():
        return None
    inputs = items[before][-max_len:]
    positives = np.unique(items[~before])
    return _instance(inputs, [(len(inputs) - 1, positives)], max_len, "causal")


def build_dense_all_action(items, timestamps, max_len: int, window_days: int,
                           n_anchors: int = 8, seed=0) -> TrainingInstance | None:
    items, ts = np.asarray(items), np.asarray(timestamps)
    if len(items) < 2:
        return None
    inputs = items[:-1][-max_len:]
    first = len(items) - 1 - len(inputs)  # sequence index of inputs[0]
    rng = np.random.default_rng(seed)
    n = min(n_anchors, len(inputs))
    anchors = np.sort(rng.choice(len(inputs), size=n, replace=False))
    span = window_days * DAY
    targets = []
    for a in anchors:
        t = ts[first + a]
        later = items[first + a + 1:]
        later_ts = ts[first + a + 1:]
        window = later[(later_ts > t) & (later_ts <= t + span)]
        if len(window):
            targets.append((int(a), np.unique(window)))
    if not targets:
        return None
    return _instance(inputs, targets, max_len, "causal")


def build_instance(cfg: ObjectiveConfig, items, timestamps, max_len: int,
                   mask_token: int | None = None, seed=0) -> TrainingInstance | None:
    if cfg.kind == "shifted_sequence":
        return build_shifted_sequence(items, max_len)
    if cfg.kind == "next_action":
        return build_next_action(items, max_len)
    if cfg.kind == "mlm":
        if mask_token is None:
            raise ValueError("mlm objective needs a mask token")
        return build_mlm(items, max_len, mask_token, cfg.mask_prob, seed)
    if cfg.kind == "all_action":
        return build_all_action(items, timestamps, max_len, cfg.window_days)
    return build_dense_all_action(items, timestamps, max_len, cfg.window_days,
                                  cfg.n_anchors, seed)
