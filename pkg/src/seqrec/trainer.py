"""Batch assembly, Adam, validation-loss early stopping and checkpointing."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import InteractionLog, ValidationFold
from .losses import LossBatchResult, LossConfig, aggregate, row_losses
from .model import ArchConfig, ModelParams, encode, init_params
from .negatives import SamplerConfig, sample
from .objectives import ObjectiveConfig, TrainingInstance, build_instance

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-3
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = 5.0
    val_seed: int = 12345

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")
        if self.max_epochs and self.patience > self.max_epochs:
            raise ValueError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, T.Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              frozen_rows: dict[str, list[int]] | None = None) -> AdamState:
    """In-place bias-corrected Adam update; frozen rows keep zero grads and moments."""
    frozen_rows = frozen_rows or {}
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise T.ContractError(f"gradient for {name} has shape {g.shape}, param {p.shape}")
        rows = frozen_rows.get(name)
        if rows:
            g = g.copy()
            g[rows] = 0.0
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if rows:
            update[rows] = 0.0
        p.data -= update.astype(p.data.dtype)
    return state


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# ---------------------------------------------------------------- batches


@dataclass
class BatchTargets:
    flat_positions: np.ndarray  # (P,) index into B*L
    positives: list[np.ndarray]  # per target position, token ids
    row_position: np.ndarray  # (R,) index into positions
    row_item: np.ndarray  # (R,) positive token per row
    row_instance: np.ndarray


def collect_targets(instances: list[TrainingInstance], max_len: int) -> BatchTargets:
    flat, positives, r_pos, r_item, r_inst = [], [], [], [], []
    for b, inst in enumerate(instances):
        for pos, items in inst.targets:
            p = len(flat)
            flat.append(b * max_len + pos)
            positives.append(np.asarray(items, dtype=np.int64))
            for it in items:
                r_pos.append(p)
                r_item.append(it)
                r_inst.append(b)
    return BatchTargets(np.array(flat, dtype=np.int64), positives,
                        np.array(r_pos, dtype=np.int64), np.array(r_item, dtype=np.int64),
                        np.array(r_inst, dtype=np.int64))


def batch_logits(params: ModelParams, instances: list[TrainingInstance], sampler: SamplerConfig,
                 neg_seed, training: bool = False, dropout_seed=None,
                 global_freq: np.ndarray | None = None):
    """Return (s_pos, s_negs, log_q, targets) for one batch of instances."""
    L = params.arch.max_len
    ids = np.stack([inst.input_ids for inst in instances])
    targets = collect_targets(instances, L)
    if len(targets.row_item) == 0:
        raise T.ContractError("no targets in batch")
    enc = encode(ids, params, training=training, seed=dropout_seed)
    d = params.arch.emb_dim
    hidden = enc.hidden.reshape(len(instances) * L, d)[targets.flat_positions[targets.row_position]]
    exclusions = [p - 1 for p in targets.positives]
    pool = np.concatenate(targets.positives) - 1
    draw = sample(sampler, params.n_items, exclusions, pool=pool, seed=neg_seed,
                  global_freq=global_freq)
    negs = draw.ids[targets.row_position] + 1
    log_q = draw.log_q[targets.row_position] if draw.log_q is not None else None
    cols = np.concatenate([targets.row_item[:, None], negs], axis=1)
    logits = T.row_dot_gather(hidden, params.item_emb, cols)
    return logits[:, 0], logits[:, slice(1, None)], log_q, targets


def batch_loss(params: ModelParams, instances: list[TrainingInstance], loss_cfg: LossConfig,
               sampler: SamplerConfig, neg_seed, training: bool = False, dropout_seed=None,
               global_freq: np.ndarray | None = None) -> LossBatchResult:
    s_pos, s_negs, log_q, tg = batch_logits(params, instances, sampler, neg_seed, training,
                                            dropout_seed, global_freq)
    if not (sampler.logq and loss_cfg.kind == "sampled_softmax"):
        log_q = None
    rows = row_losses(loss_cfg, s_pos, s_negs, params.n_items, log_q)
    return aggregate(rows, tg.row_instance, tg.row_position)


# ---------------------------------------------------------------- validation


def user_tokens(log: InteractionLog) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Per-user time-ordered token ids (internal item id + 1) and timestamps."""
    return {u: (items + 1, ts) for u, (items, ts) in log.sequences().items()}


def next_item_instance(history_tokens, target_token: int, max_len: int,
                       mask_token: int | None = None) -> TrainingInstance:
    """Predict ``target_token`` from the last input position (mask token appended for MLM)."""
    hist = np.asarray(history_tokens, dtype=np.int64)
    if mask_token is not None:
        hist = np.r_[hist[-(max_len - 1):] if max_len > 1 else hist[:0], mask_token]
    hist = hist[-max_len:]
    ids = np.zeros(max_len, dtype=np.int64)
    ids[max_len - len(hist):] = hist
    mode = "bidirectional" if mask_token is not None else "causal"
    return TrainingInstance(ids, [(max_len - 1, np.array([target_token]))], mode)


def validation_instances(fold: ValidationFold, max_len: int,
                         mask_token: int | None = None) -> list[TrainingInstance]:
    seqs = user_tokens(fold.reduced_train)
    out = []
    for u in sorted(fold.holdout):
        if u not in seqs:
            continue
        item, _ = fold.holdout[u]
        out.append(next_item_instance(seqs[u][0], item + 1, max_len, mask_token))
    return out


def validation_logits(params: ModelParams, instances: list[TrainingInstance],
                      sampler: SamplerConfig, seed: int, batch_size: int = 128,
                      global_freq: np.ndarray | None = None):
    """Inference-mode logits for each validation instance, in order."""
    pos, negs, lq = [], [], []
    for bi, start in enumerate(range(0, len(instances), batch_size)):
        chunk = instances[start:start + batch_size]
        s_pos, s_negs, log_q, _ = batch_logits(params, chunk, sampler, (seed, bi),
                                               training=False, global_freq=global_freq)
        pos.append(s_pos.data)
        negs.append(s_negs.data)
        if log_q is not None:
            lq.append(log_q)
    return np.concatenate(pos), np.concatenate(negs), (np.concatenate(lq) if lq else None)


def validation_loss(params: ModelParams, instances: list[TrainingInstance], loss_cfg: LossConfig,
                    sampler: SamplerConfig, seed: int, batch_size: int = 128,
                    global_freq: np.ndarray | None = None) -> float:
    if not instances:
        raise T.ContractError("empty validation fold")
    s_pos, s_negs, log_q = validation_logits(params, instances, sampler, seed, batch_size,
                                             global_freq)
    if not (sampler.logq and loss_cfg.kind == "sampled_softmax"):
        log_q = None
    with T.precision(np.float64):
        rows = row_losses(loss_cfg, s_pos.astype(np.float64), s_negs.astype(np.float64),
                          params.n_items, log_q)
    return float(rows.data.mean())


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict]
    best_epoch: int | None
    best_val_loss: float
    stopped_early: bool


def check_consistency(arch: ArchConfig, objective: ObjectiveConfig) -> None:
    if arch.attention_mode != objective.attention_mode:
        raise ValueError(f"objective {objective.kind!r} needs {objective.attention_mode} "
                         f"attention, arch has {arch.attention_mode}")


def _grads_by_name(params: ModelParams, grads: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, t in params.tensors.items():
        g = grads.get(t)
        out[name] = g if g is not None else np.zeros_like(t.data)
    return out


def _abort(message: str, diag: dict, out_dir) -> None:
    if out_dir is not None:
        path = out_dir / "diagnostics.json"
        diag = dict(diag, path=str(path))
        path.write_text(json.dumps(diag, indent=2))
    raise TrainingDiverged(message, diag)


def train(train_log: InteractionLog, fold: ValidationFold, arch: ArchConfig,
          objective: ObjectiveConfig, sampler: SamplerConfig, loss_cfg: LossConfig,
          cfg: TrainConfig, out_dir=None) -> TrainResult:
    check_consistency(arch, objective)
    n_items = train_log.n_items
    mlm = objective.kind == "mlm"
    params = init_params(arch, n_items, seed=cfg.seed, with_mask_token=mlm)
    mask_token = params.mask_token
    seqs = user_tokens(fold.reduced_train)
    users = np.array(sorted(seqs), dtype=np.int64)
    global_freq = np.bincount(fold.reduced_train.items, minlength=n_items).astype(np.float64)
    val_instances = validation_instances(fold, arch.max_len, mask_token)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "history.jsonl").write_text("")

    best = params.copy()
    best_val = float("inf")
    best_epoch = None
    since = 0
    history: list[dict] = []
    state = AdamState()
    step = 0
    stopped = False
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng((cfg.seed, epoch)).permutation(users)
        instances = []
        for u in order:
            items, ts = seqs[int(u)]
            inst = build_instance(objective, items, ts, arch.max_len, mask_token,
                                  seed=(cfg.seed, epoch, int(u)))
            if inst is not None:
                instances.append(inst)
        losses = []
        for bi, start in enumerate(range(0, len(instances), cfg.batch_size)):
            chunk = instances[start:start + cfg.batch_size]
            neg_seed = (cfg.seed, epoch, bi)
            with T.Graph() as graph:
                res = batch_loss(params, chunk, loss_cfg, sampler, neg_seed, training=True,
                                 dropout_seed=(cfg.seed, step), global_freq=global_freq)
            value = res.value
            if not np.isfinite(value):
                diag = {"epoch": epoch, "step": step, "batch": bi,
                        "neg_seed": list(neg_seed), "dropout_seed": [cfg.seed, step]}
                _abort(f"non-finite loss at epoch {epoch} step {step}", diag, out_dir)
            grads = _grads_by_name(params, T.backward(graph, res.loss))
            clip_by_global_norm(grads, cfg.grad_clip)
            adam_step(params.tensors, grads, state, cfg.learning_rate, cfg.beta1, cfg.beta2,
                      cfg.eps, params.frozen_rows())
            losses.append(value)
            step += 1
        val = validation_loss(params, val_instances, loss_cfg, sampler, cfg.val_seed,
                              cfg.batch_size, global_freq)
        record = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else None,
                  "val_loss": val, "seconds": round(time.perf_counter() - t0, 3)}
        history.append(record)
        log.info("epoch %d train %.4f val %.4f", epoch, record["train_loss"] or np.nan, val)
        if out_dir is not None:
            with open(out_dir / "history.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
        if not np.isfinite(val):
            _abort(f"non-finite validation loss at epoch {epoch}",
                   {"epoch": epoch, "val_seed": cfg.val_seed}, out_dir)
        if val < best_val:
            best_val, best_epoch, since = val, epoch, 0
            best = params.copy()
            if out_dir is not None:
                best.save(out_dir / "checkpoint.bin")
        else:
            since += 1
            if since >= cfg.patience:
                stopped = True
                break
    if out_dir is not None and best_epoch is None:
        best.save(out_dir / "checkpoint.bin")
    return TrainResult(best, history, best_epoch, best_val, stopped)


def with_attention(arch: ArchConfig, objective: ObjectiveConfig) -> ArchConfig:
    """Copy of ``arch`` with the attention mode the objective requires."""
    return replace(arch, attention_mode=objective.attention_mode)
