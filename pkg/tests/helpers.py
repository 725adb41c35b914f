"""Shared fixtures and check routines for the test suite."""

from __future__ import annotations

import numpy as np

from seqrec import tensor as T
from seqrec.losses import LossConfig
from seqrec.model import ArchConfig, init_params
from seqrec.negatives import SamplerConfig
from seqrec.objectives import build_shifted_sequence
from seqrec.oracles import GRAD_FLOOR, finite_diff_grad
from seqrec.trainer import batch_loss


def random_instances(rng, n_items: int, max_len: int, n_seqs: int = 3):
    out = []
    for _ in range(n_seqs):
        length = int(rng.integers(2, max_len + 2))
        seq = rng.integers(1, n_items + 1, size=length)
        out.append(build_shifted_sequence(seq, max_len))
    return out


def model_grad_check(block_style: str, seed: int, d: int = 8, max_len: int = 6,
                     n_blocks: int = 2, n_items: int = 12, h: float = 1e-3):
    """Relative errors between backward() and central differences, per parameter.

    Returns ``{name: (elementwise_max, tensor_norm)}`` where the elementwise
    figure is ``max |a - n| / max(|n|, floor)`` and the norm figure is
    ``||a - n|| / max(||n||, floor)``.

    Everything runs in float64; dropout is active with a fixed seed so the
    masks repeat between evaluations.
    """
    rng = np.random.default_rng(seed)
    arch = ArchConfig(emb_dim=d, n_blocks=n_blocks, n_heads=2, max_len=max_len,
                      block_style=block_style, dropout_rate=0.1)
    loss_cfg = LossConfig("sampled_softmax")
    sampler = SamplerConfig("uniform", n_negatives=5)
    with T.precision(np.float64):
        params = init_params(arch, n_items, seed=seed).copy(np.float64)
        # move LayerNorm affine terms and the padding-free rows off their init values
        for name, t in params.tensors.items():
            if name.endswith(".gain") or name.endswith(".bias") or name.endswith("b1") \
                    or name.endswith("b2"):
                t.data[...] = t.data + rng.normal(0, 0.1, t.shape)
        instances = random_instances(rng, n_items, max_len)

        def loss_value():
            return batch_loss(params, instances, loss_cfg, sampler, neg_seed=seed,
                              training=True, dropout_seed=(seed,)).value

        with T.Graph() as g:
            res = batch_loss(params, instances, loss_cfg, sampler, neg_seed=seed,
                             training=True, dropout_seed=(seed,))
        grads = T.backward(g, res.loss)
        worst = {}
        for name, t in params.tensors.items():
            analytic = grads.get(t, np.zeros_like(t.data)).copy()
            original = t.data.copy()

            def f(x, t=t):
                t.data = x
                return loss_value()

            numeric = finite_diff_grad(f, original, h)
            t.data = original
            if name == "item_emb":
                analytic[0] = numeric[0] = 0.0  # frozen padding row
            rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), GRAD_FLOOR)
            norm = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), GRAD_FLOOR)
            worst[name] = (float(rel.max()), float(norm))
    return worst
