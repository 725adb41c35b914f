"""Transformer sequence encoder with Post-LN (SASRec) or LiGR gated blocks.

Token ids: 0 is padding, items are ``internal_id + 1``, and the optional mask
token (MLM) is ``n_items + 1``. Item embeddings are tied with the scoring head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

BLOCK_STYLES = ("postln_sasrec", "ligr")
ATTENTION_MODES = ("causal", "bidirectional")


@dataclass
class ArchConfig:
    emb_dim: int = 64
    n_blocks: int = 2
    n_heads: int = 2
    dropout_rate: float = 0.1
    ff_emb_mult: int = 4
    max_len: int = 50
    block_style: str = "ligr"
    attention_mode: str = "causal"
    gate_per_channel: bool = False
    gate_bias: bool = False
    final_norm: bool = True
    ln_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.emb_dim % self.n_heads:
            raise ValueError(f"emb_dim {self.emb_dim} not divisible by n_heads {self.n_heads}")
        if self.max_len < 1 or self.ff_emb_mult < 1 or self.n_blocks < 0:
            raise ValueError("max_len and ff_emb_mult must be >= 1, n_blocks >= 0")
        if self.block_style not in BLOCK_STYLES:
            raise ValueError(f"block_style must be one of {BLOCK_STYLES}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}")


@dataclass
class ModelParams:
    arch: ArchConfig
    n_items: int
    with_mask_token: bool
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def item_emb(self) -> Tensor:
        return self.tensors["item_emb"]

    @property
    def mask_token(self) -> int | None:
        return self.n_items + 1 if self.with_mask_token else None

    def trainable(self) -> dict[str, Tensor]:
        return self.tensors

    def frozen_rows(self) -> dict[str, list[int]]:
        return {"item_emb": [0]}

    def copy(self, dtype=None) -> "ModelParams":
        dtype = dtype or T.default_dtype()
        with T.precision(dtype):
            tensors = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                       for k, v in self.tensors.items()}
        return ModelParams(self.arch, self.n_items, self.with_mask_token, tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def meta(self) -> dict:
        return {"arch": asdict(self.arch), "n_items": self.n_items,
                "with_mask_token": self.with_mask_token}

    def save(self, path) -> None:
        T.save_params(path, self.arrays(), self.meta())

    @classmethod
    def load(cls, path) -> "ModelParams":
        arrays, meta = T.load_params(path)
        arch = ArchConfig(**meta["arch"])
        tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
        return cls(arch, meta["n_items"], meta["with_mask_token"], tensors)


def init_params(arch: ArchConfig, n_items: int, seed: int = 0,
                with_mask_token: bool = False) -> ModelParams:
    rng = np.random.default_rng(seed)
    d = arch.emb_dim
    arrays: dict[str, np.ndarray] = {}

    def dense(name, fan_in, fan_out):
        std = math.sqrt(2.0 / (fan_in + fan_out))
        arrays[name] = rng.normal(0.0, std, size=(fan_in, fan_out))

    vocab = n_items + 1 + int(with_mask_token)
    emb = rng.normal(0.0, d ** -0.5, size=(vocab, d))
    emb[0] = 0.0
    arrays["item_emb"] = emb
    arrays["pos_emb"] = rng.normal(0.0, d ** -0.5, size=(arch.max_len, d))
    gate_out = d if arch.gate_per_channel else 1
    for b in range(arch.n_blocks):
        p = f"block{b}."
        for w in ("wq", "wk", "wv", "wo"):
            dense(p + w, d, d)
        for ln in ("ln_attn", "ln_ffn"):
            arrays[p + ln + ".gain"] = np.ones(d)
            arrays[p + ln + ".bias"] = np.zeros(d)
        if arch.block_style == "ligr":
            inner = arch.ff_emb_mult * d
            dense(p + "ffn.w1", d, inner)
            dense(p + "ffn.w2", d, inner)
            dense(p + "ffn.w3", inner, d)
            for g in ("gate_attn", "gate_ffn"):
                arrays[p + g] = rng.normal(0.0, d ** -0.5, size=(d, gate_out))
                if arch.gate_bias:
                    arrays[p + g + ".bias"] = np.zeros(gate_out)
        else:
            dense(p + "ffn.w1", d, d)
            arrays[p + "ffn.b1"] = np.zeros(d)
            dense(p + "ffn.w2", d, d)
            arrays[p + "ffn.b2"] = np.zeros(d)
    if arch.final_norm:
        arrays["final_ln.gain"] = np.ones(d)
        arrays["final_ln.bias"] = np.zeros(d)
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    return ModelParams(arch, n_items, with_mask_token, tensors)


# ---------------------------------------------------------------- inputs


def pad_sequences(seqs, max_len: int) -> np.ndarray:
    """Left-pad with 0, keeping the most recent ``max_len`` ids."""
    out = np.zeros((len(seqs), max_len), dtype=np.int64)
    for r, s in enumerate(seqs):
        s = np.asarray(s, dtype=np.int64)[-max_len:]
        if len(s):
            out[r, max_len - len(s):] = s
    return out


def attention_mask(ids: np.ndarray, mode: str) -> np.ndarray:
    """Additive (B, 1, L, L) mask: padded keys always hidden, future keys when causal."""
    b, length = ids.shape
    blocked = np.broadcast_to((ids == 0)[:, None, None, :], (b, 1, length, length))
    if mode == "causal":
        future = np.triu(np.ones((length, length), dtype=bool), k=1)
        blocked = blocked | future[None, None]
    return np.where(blocked, -np.inf, 0.0).astype(T.default_dtype())


class _Dropout:
    """Dropout sites keyed by (seed, step, call index) so reruns repeat masks."""

    def __init__(self, rate: float, training: bool, seed=None):
        self.rate = rate
        self.training = training and rate > 0
        self.seed = tuple(np.atleast_1d(seed).tolist()) if seed is not None else (0,)
        self.calls = 0

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training:
            return x
        self.calls += 1
        return T.dropout(x, self.rate, self.seed + (self.calls,), training=True)


def embed(ids, params: ModelParams, drop: _Dropout | None = None) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    length = ids.shape[1]
    if length > params.arch.max_len:
        ids = ids[:, -params.arch.max_len:]
        length = params.arch.max_len
    vocab = params.item_emb.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"item ids must lie in [0, {vocab}), got range "
                         f"[{ids.min()}, {ids.max()}]")
    pos = params["pos_emb"][slice(params.arch.max_len - length, None)]
    x = params.item_emb[ids] + pos
    return drop(x) if drop is not None else x


def _heads(x: Tensor, n_heads: int) -> Tensor:
    b, length, d = x.shape
    return x.reshape(b, length, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def multi_head_attention(x: Tensor, params: ModelParams, prefix: str, mask: np.ndarray) -> Tensor:
    b, length, d = x.shape
    h = params.arch.n_heads
    q = _heads(x @ params[prefix + "wq"], h)
    k = _heads(x @ params[prefix + "wk"], h)
    v = _heads(x @ params[prefix + "wv"], h)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d // h))
    attn = T.softmax_rows(scores, mask)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, length, d)
    return ctx @ params[prefix + "wo"]


def _ln(x: Tensor, params: ModelParams, name: str) -> Tensor:
    return T.layer_norm(x, params[name + ".gain"], params[name + ".bias"], params.arch.ln_eps)


def block_forward_postln(h: Tensor, params: ModelParams, index: int, mask: np.ndarray,
                         drop: _Dropout | None = None) -> Tensor:
    drop = drop or _Dropout(0.0, False)
    p = f"block{index}."
    h1 = _ln(h + drop(multi_head_attention(h, params, p, mask)), params, p + "ln_attn")
    inner = T.relu(h1 @ params[p + "ffn.w1"] + params[p + "ffn.b1"])
    ffn = inner @ params[p + "ffn.w2"] + params[p + "ffn.b2"]
    return _ln(h1 + drop(ffn), params, p + "ln_ffn")


def swiglu(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    a = T.swish(x @ params[prefix + "ffn.w1"])
    return (a * (x @ params[prefix + "ffn.w2"])) @ params[prefix + "ffn.w3"]


def _gate(h: Tensor, params: ModelParams, name: str) -> Tensor:
    z = h @ params[name]
    if params.arch.gate_bias:
        z = z + params[name + ".bias"]
    return T.sigmoid(z)


def block_forward_ligr(h: Tensor, params: ModelParams, index: int, mask: np.ndarray,
                       drop: _Dropout | None = None) -> Tensor:
    """Two residual sublayers, each ``h + F(LN(h)) * sigmoid(h @ W_gate)``."""
    drop = drop or _Dropout(0.0, False)
    p = f"block{index}."
    attn = multi_head_attention(_ln(h, params, p + "ln_attn"), params, p, mask)
    h = h + drop(attn) * _gate(h, params, p + "gate_attn")
    ffn = swiglu(_ln(h, params, p + "ln_ffn"), params, p)
    return h + drop(ffn) * _gate(h, params, p + "gate_ffn")


@dataclass
class EncodedBatch:
    hidden: Tensor  # (B, L, d)
    padding: np.ndarray  # (B, L) True where padded
    ids: np.ndarray


def encode(ids, params: ModelParams, training: bool = False, seed=None) -> EncodedBatch:
    arch = params.arch
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    ids = ids[:, -arch.max_len:]
    drop = _Dropout(arch.dropout_rate, training, seed)
    keep = (ids != 0)[:, :, None].astype(T.default_dtype())
    mask = attention_mask(ids, arch.attention_mode)
    h = embed(ids, params, drop) * keep
    block = block_forward_ligr if arch.block_style == "ligr" else block_forward_postln
    for b in range(arch.n_blocks):
        h = block(h, params, b, mask, drop) * keep
    if arch.final_norm:
        h = _ln(h, params, "final_ln")
    return EncodedBatch(h, ids == 0, ids)


def score(hidden: Tensor, params: ModelParams, item_ids=None) -> Tensor:
    """Dot-product logits against tied item embeddings.

    ``item_ids=None`` scores the full catalog (columns are items 1..n_items);
    otherwise ``item_ids`` is an (N, m) array of token ids.
    """
    hidden = T.as_tensor(hidden)
    if hidden.ndim == 1:
        hidden = hidden.reshape(1, -1)
    if item_ids is None:
        table = params.item_emb[slice(1, params.n_items + 1)]
        return hidden @ table.transpose(1, 0)
    item_ids = np.asarray(item_ids, dtype=np.int64)
    if item_ids.ndim == 1:
        item_ids = np.broadcast_to(item_ids, (hidden.shape[0], len(item_ids)))
    if item_ids.size and (item_ids.min() < 1 or item_ids.max() > params.n_items):
        raise ContractError("cannot score padding or mask token rows")
    return T.row_dot_gather(hidden, params.item_emb, item_ids)
