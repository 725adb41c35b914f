"""BCE, gBCE and sampled-softmax losses on positive / sampled-negative logits.

Each loss maps ``s_pos`` of shape ``(R,)`` and ``s_negs`` of shape ``(R, k)``
to per-row losses ``(R,)``; a single instance can be passed as ``()`` and
``(k,)``. :func:`aggregate` reduces rows to the batch scalar.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

KINDS = ("bce", "gbce", "sampled_softmax")


@dataclass
class LossConfig:
    kind: str = "sampled_softmax"
    gbce_t: float = 0.75

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"loss kind must be one of {KINDS}, got {self.kind!r}")
        if not 0.0 <= self.gbce_t <= 1.0:
            raise ValueError("gbce_t must be in [0, 1]")


@dataclass
class LossBatchResult:
    loss: Tensor
    n_targets: int

    @property
    def value(self) -> float:
        return float(self.loss.data)


def gbce_beta(n_negatives: int, catalog_size: int, t: float) -> float:
    """Positive-term exponent from the sampling rate ``alpha = k / (|I| - 1)``.

    ``alpha * (t * (1 - 1/alpha) + 1/alpha)`` expands to ``1 - t * (1 - alpha)``;
    the expanded form is exactly 1.0 at ``t = 0`` and ``alpha = 1``.
    """
    if catalog_size <= 1:
        raise ValueError("catalog_size must exceed 1")
    alpha = n_negatives / (catalog_size - 1)
    if alpha > 1.0:
        warnings.warn(f"sampling rate {alpha:.3f} > 1, clamped to 1", stacklevel=2)
        alpha = 1.0
    return 1.0 - t * (1.0 - alpha)


def _negative_term(s_negs: Tensor) -> Tensor:
    # -log(1 - sigmoid(s)) == -log_sigmoid(-s)
    return T.tsum(T.log_sigmoid(-s_negs), axis=-1) * -1.0


def bce_loss(s_pos, s_negs) -> Tensor:
    s_pos, s_negs = T.as_tensor(s_pos), T.as_tensor(s_negs)
    return T.log_sigmoid(s_pos) * -1.0 + _negative_term(s_negs)


def gbce_loss(s_pos, s_negs, t: float, catalog_size: int) -> Tensor:
    s_pos, s_negs = T.as_tensor(s_pos), T.as_tensor(s_negs)
    beta = gbce_beta(s_negs.shape[-1], catalog_size, t)
    return T.log_sigmoid(s_pos) * -beta + _negative_term(s_negs)


def sampled_softmax_loss(s_pos, s_negs, log_q=None) -> Tensor:
    """``-s_pos + logsumexp(s_pos, s_neg - log_q)``; the positive is never corrected."""
    s_pos, s_negs = T.as_tensor(s_pos), T.as_tensor(s_negs)
    if log_q is not None:
        log_q = np.asarray(log_q)
        if log_q.shape != s_negs.shape:
            raise ContractError(f"log_q shape {log_q.shape} != negatives {s_negs.shape}")
        s_negs = s_negs - log_q
    pos_col = s_pos.reshape(s_pos.shape + (1,))
    return T.logsumexp(T.concat([pos_col, s_negs], axis=-1)) - s_pos


def row_losses(cfg: LossConfig, s_pos, s_negs, catalog_size: int, log_q=None) -> Tensor:
    if cfg.kind == "sampled_softmax":
        return sampled_softmax_loss(s_pos, s_negs, log_q)
    if log_q is not None:
        raise ContractError("logQ correction is only defined for sampled softmax")
    if cfg.kind == "bce":
        return bce_loss(s_pos, s_negs)
    return gbce_loss(s_pos, s_negs, cfg.gbce_t, catalog_size)


def nested_mean_weights(instance: np.ndarray, position: np.ndarray) -> np.ndarray:
    """Row weights for: mean over a position's positives, then over the
    instance's positions, then over instances."""
    instance = np.asarray(instance, dtype=np.int64)
    position = np.asarray(position, dtype=np.int64)
    if len(instance) == 0:
        raise ContractError("no targets in batch")
    _, inst_idx = np.unique(instance, return_inverse=True)
    pairs = np.stack([instance, position], axis=1)
    _, pos_idx, per_pos = np.unique(pairs, axis=0, return_inverse=True, return_counts=True)
    pos_idx = pos_idx.ravel()
    pos_instance = np.zeros(len(per_pos), dtype=np.int64)
    pos_instance[pos_idx] = inst_idx
    positions_per_inst = np.bincount(pos_instance)
    n_inst = len(positions_per_inst)
    return 1.0 / (per_pos[pos_idx] * positions_per_inst[inst_idx] * n_inst)


def aggregate(losses, instance=None, position=None) -> LossBatchResult:
    """Nested mean of per-row losses; each row is one (position, positive) pair."""
    losses = T.as_tensor(losses)
    n = losses.shape[0] if losses.ndim else 1
    if n == 0:
        raise ContractError("no targets in batch")
    if instance is None:
        instance = np.zeros(n, dtype=np.int64)
    if position is None:
        position = np.arange(n)
    w = nested_mean_weights(instance, position).astype(losses.data.dtype)
    n_targets = len(np.unique(np.stack([instance, position], 1), axis=0))
    return LossBatchResult(T.tsum(losses * w), n_targets)
