import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqrec import tensor as T
from seqrec.model import (ArchConfig, ModelParams, attention_mask, block_forward_ligr,
                          block_forward_postln, embed, encode, init_params, pad_sequences, score)
from seqrec.oracles import BLOCK_ATOL, gated_block_reference
from seqrec.trainer import batch_loss
from seqrec.losses import LossConfig
from seqrec.negatives import SamplerConfig

from helpers import model_grad_check, random_instances

N_ITEMS = 15


def small(style="ligr", mode="causal", **kw):
    arch = ArchConfig(emb_dim=kw.pop("d", 8), n_blocks=kw.pop("n_blocks", 2), n_heads=2,
                      max_len=kw.pop("L", 6), block_style=style, attention_mode=mode,
                      dropout_rate=kw.pop("dropout", 0.0), **kw)
    return init_params(arch, N_ITEMS, seed=kw.get("seed", 0))


def random_ids(rng, b, length, pad=True):
    ids = rng.integers(1, N_ITEMS + 1, size=(b, length))
    if pad:
        for r in range(b):
            ids[r, :rng.integers(0, length)] = 0
    return ids


# ---------------------------------------------------------------- config / params


def test_arch_config_validation():
    with pytest.raises(ValueError):
        ArchConfig(emb_dim=10, n_heads=3)
    with pytest.raises(ValueError):
        ArchConfig(block_style="hstu")
    with pytest.raises(ValueError):
        ArchConfig(max_len=0)


def test_param_shapes_and_padding_row():
    p = small("ligr")
    assert p.item_emb.shape == (N_ITEMS + 1, 8)
    assert np.all(p.item_emb.data[0] == 0)
    assert p["block0.gate_attn"].shape == (8, 1)
    assert p["block0.ffn.w1"].shape == (8, 32)
    q = small("postln_sasrec")
    assert q["block1.ffn.w1"].shape == (8, 8) and "block1.gate_ffn" not in q.tensors
    m = init_params(ArchConfig(emb_dim=8, n_heads=2), N_ITEMS, with_mask_token=True)
    assert m.item_emb.shape == (N_ITEMS + 2, 8) and m.mask_token == N_ITEMS + 1


def test_pad_sequences_left_pads_and_truncates():
    out = pad_sequences([[1, 2], [1, 2, 3, 4, 5]], 3)
    np.testing.assert_array_equal(out, [[0, 1, 2], [3, 4, 5]])


# ---------------------------------------------------------------- embed


def test_all_padding_rows_equal_positions():
    p = small()
    x = embed(np.zeros((1, 6), dtype=int), p).data[0]
    np.testing.assert_array_equal(x, p["pos_emb"].data)


def test_embed_row_is_item_plus_position():
    p = small(L=2)
    x = embed(np.array([[0, 4]]), p).data[0]
    np.testing.assert_array_equal(x[1], p.item_emb.data[4] + p["pos_emb"].data[1])


def test_embed_truncates_to_last_L():
    p = small(L=4)
    seq = np.arange(1, 8)[None]  # length L + 3
    np.testing.assert_array_equal(embed(seq, p).data, embed(seq[:, -4:], p).data)


def test_embed_rejects_out_of_range():
    with pytest.raises(IndexError):
        embed(np.array([[0, N_ITEMS + 1]]), small())


# ---------------------------------------------------------------- blocks


@pytest.mark.parametrize("style", ["ligr", "postln_sasrec"])
def test_block_causality(style):
    rng = np.random.default_rng(0)
    p = small(style)
    block = block_forward_ligr if style == "ligr" else block_forward_postln
    ids = np.ones((1, 6), dtype=int)
    mask = attention_mask(ids, "causal")
    h = rng.normal(size=(1, 6, 8))
    base = block(T.Tensor(h), p, 0, mask).data
    h2 = h.copy()
    h2[0, 4:] += rng.normal(size=(2, 8))
    out = block(T.Tensor(h2), p, 0, mask).data
    np.testing.assert_array_equal(out[0, :4], base[0, :4])
    assert base.shape == h.shape


def test_postln_zero_weights_is_double_layer_norm():
    p = small("postln_sasrec")
    for name, t in p.tensors.items():
        if name.startswith("block0.") and (".w" in name or ".b" in name) and "ln_" not in name:
            t.data[...] = 0
    rng = np.random.default_rng(1)
    h = rng.normal(size=(2, 6, 8)).astype(np.float32)
    mask = attention_mask(np.ones((2, 6), dtype=int), "causal")
    out = block_forward_postln(T.Tensor(h), p, 0, mask).data
    ones, zeros = T.Tensor(np.ones(8)), T.Tensor(np.zeros(8))
    expected = T.layer_norm(T.layer_norm(T.Tensor(h), ones, zeros), ones, zeros).data
    np.testing.assert_allclose(out, expected, atol=1e-6)
    assert np.isfinite(out).all()


def test_ligr_matches_straight_line_reference():
    rng = np.random.default_rng(2)
    arch = ArchConfig(emb_dim=4, n_blocks=1, n_heads=2, max_len=3, dropout_rate=0.0)
    with T.precision(np.float64):
        p = init_params(arch, 5, seed=3).copy(np.float64)
        for name in ("block0.ln_attn.gain", "block0.ln_attn.bias", "block0.ln_ffn.gain",
                     "block0.ln_ffn.bias"):
            p[name].data[...] = rng.normal(size=4)
        h = rng.normal(size=(3, 4))
        mask = attention_mask(np.ones((1, 3), dtype=int), "causal")
        out = block_forward_ligr(T.Tensor(h[None]), p, 0, mask).data[0]
    weights = {k.removeprefix("block0."): v.data for k, v in p.tensors.items()
               if k.startswith("block0.")}
    ref = gated_block_reference(h, weights, n_heads=2, causal=True)
    np.testing.assert_allclose(out, ref, atol=BLOCK_ATOL)


def test_ligr_gate_closed_is_identity():
    rng = np.random.default_rng(4)
    p = small("ligr")
    h = (np.abs(rng.normal(size=(1, 6, 8))) + 0.5).astype(np.float32)  # positive coordinates
    for g in ("block0.gate_attn", "block0.gate_ffn"):
        p[g].data[...] = -5.0  # pre-activation <= -5 * sum(h) < -20
    assert (1 / (1 + np.exp(-(h @ p["block0.gate_attn"].data)))).max() < 1e-6
    mask = attention_mask(np.ones((1, 6), dtype=int), "causal")
    out = block_forward_ligr(T.Tensor(h), p, 0, mask).data
    assert np.linalg.norm(out - h) < 1e-4 * np.linalg.norm(h)


@pytest.mark.parametrize("style", ["ligr", "postln_sasrec"])
def test_encode_causal_invariance_with_padding(style):
    rng = np.random.default_rng(5)
    p = small(style)
    ids = random_ids(rng, 4, 6)
    base = encode(ids, p).hidden.data
    for _ in range(20):
        i = int(rng.integers(0, 5))
        pert = ids.copy()
        pert[:, i + 1:] = rng.integers(1, N_ITEMS + 1, size=(4, 5 - i))
        out = encode(pert, p).hidden.data
        keep = ids[:, :i + 1] == pert[:, :i + 1]
        assert keep.all()
        np.testing.assert_array_equal(out[:, :i + 1], base[:, :i + 1])


def test_encode_no_blocks_is_embedding_plus_norm():
    p = small("ligr", n_blocks=0, final_norm=False)
    ids = np.array([[0, 3, 4, 5, 6, 7]])
    np.testing.assert_array_equal(encode(ids, p).hidden.data,
                                  embed(ids, p).data * (ids != 0)[:, :, None])


def test_bidirectional_sees_the_future():
    p = small("ligr", mode="bidirectional")
    ids = np.array([[1, 2, 3, 4, 5, 6]])
    swapped = ids.copy()
    swapped[0, [3, 4]] = swapped[0, [4, 3]]
    a, b = encode(ids, p).hidden.data, encode(swapped, p).hidden.data
    assert not np.allclose(a[0, 0], b[0, 0])


def test_encode_deterministic_with_dropout_seed():
    p = small("ligr", dropout=0.3)
    ids = np.array([[0, 0, 3, 4, 5, 6]])
    a = encode(ids, p, training=True, seed=(1, 2)).hidden.data
    b = encode(ids, p, training=True, seed=(1, 2)).hidden.data
    c = encode(ids, p, training=True, seed=(1, 3)).hidden.data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    np.testing.assert_array_equal(encode(ids, p).hidden.data, encode(ids, p).hidden.data)


@given(st.sampled_from(["ligr", "postln_sasrec"]), st.sampled_from(["causal", "bidirectional"]),
       st.integers(1, 3), st.sampled_from([4, 8]), st.integers(1, 7), st.integers(1, 3),
       st.booleans(), st.booleans())
@settings(max_examples=25, deadline=None)
def test_encode_shape_contract(style, mode, b, d, length, n_blocks, per_channel, gate_bias):
    arch = ArchConfig(emb_dim=d, n_blocks=n_blocks, n_heads=2, max_len=length, block_style=style,
                      attention_mode=mode, gate_per_channel=per_channel, gate_bias=gate_bias)
    p = init_params(arch, N_ITEMS)
    ids = random_ids(np.random.default_rng(0), b, length)
    out = encode(ids, p)
    assert out.hidden.shape == (b, length, d)
    assert np.isfinite(out.hidden.data).all()


# ---------------------------------------------------------------- scoring


def test_score_self_is_max_for_controlled_norms():
    p = small()
    rng = np.random.default_rng(7)
    e = rng.normal(size=(N_ITEMS, 8))
    p.item_emb.data[1:] = e / np.linalg.norm(e, axis=1, keepdims=True)
    for i in range(1, N_ITEMS + 1):
        logits = score(T.Tensor(p.item_emb.data[i]), p).data[0]
        assert int(np.argmax(logits)) + 1 == i


def test_score_zero_hidden_and_gather_consistency():
    p = small()
    assert np.all(score(T.Tensor(np.zeros((2, 8))), p).data == 0)
    h = T.Tensor(np.random.default_rng(8).normal(size=(3, 8)))
    full = score(h, p).data
    ids = np.array([[1, 5, 15], [2, 2, 7], [9, 3, 1]])
    np.testing.assert_array_equal(score(h, p, ids).data, np.take_along_axis(full, ids - 1, 1))


def test_score_rejects_padding_and_mask_rows():
    p = small()
    h = T.Tensor(np.ones((1, 8)))
    with pytest.raises(T.ContractError):
        score(h, p, np.array([[0]]))
    with pytest.raises(T.ContractError):
        score(h, p, np.array([[N_ITEMS + 1]]))


def test_tied_embeddings_share_storage():
    p = small()
    ids = np.array([[0, 0, 0, 0, 0, 3]])
    before_in = embed(ids, p).data.copy()
    before_out = score(T.Tensor(np.ones((1, 8))), p).data.copy()
    p.item_emb.data[3] += 1.0
    assert not np.array_equal(embed(ids, p).data, before_in)
    after_out = score(T.Tensor(np.ones((1, 8))), p).data
    assert after_out[0, 2] == pytest.approx(before_out[0, 2] + 8.0, rel=1e-5)


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("style", ["ligr", "postln_sasrec"])
def test_every_parameter_gets_gradient(style):
    rng = np.random.default_rng(9)
    p = small(style, dropout=0.1)
    for name, t in p.tensors.items():
        if name.endswith(".bias") or name.endswith(".b1") or name.endswith(".b2"):
            t.data[...] = rng.normal(0, 0.1, t.shape)
    instances = random_instances(rng, N_ITEMS, 6, n_seqs=8)
    with T.Graph() as g:
        res = batch_loss(p, instances, LossConfig(), SamplerConfig(n_negatives=4), 0,
                         training=True, dropout_seed=(0,))
    grads = T.backward(g, res.loss)
    for name, t in p.tensors.items():
        grad = grads[t]
        if name == "item_emb":
            grad = grad[1:]
        assert np.abs(grad).max() > 0, name


@pytest.mark.parametrize("style", ["ligr", "postln_sasrec"])
def test_gradients_match_finite_differences(style):
    # tensor-norm relative error with the default step h=1e-3
    worst = model_grad_check(style, seed=0, h=1e-3)
    assert max(norm for _, norm in worst.values()) < 1e-4, worst


def test_checkpoint_round_trip(tmp_path):
    p = small("ligr", gate_bias=True)
    p.save(tmp_path / "ckpt.bin")
    q = ModelParams.load(tmp_path / "ckpt.bin")
    assert q.arch == p.arch and q.n_items == p.n_items
    for k in p.tensors:
        np.testing.assert_array_equal(q[k].data, p[k].data)
