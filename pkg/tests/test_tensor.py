import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seqrec import tensor as T
from seqrec.oracles import GRAD_RTOL, finite_diff_grad, matmul_loops

finite = st.floats(-5, 5, allow_nan=False, width=64)


def grad_of(fn, *inputs):
    """Analytic gradients of scalar fn(*tensors) in float64."""
    with T.precision(np.float64):
        ts = [T.Tensor(x, requires_grad=True) for x in inputs]
        with T.Graph() as g:
            out = fn(*ts)
        grads = T.backward(g, out)
        return [grads.get(t, np.zeros_like(t.data)) for t in ts]


def numeric_grad(fn, inputs, which, h=1e-5):
    inputs = [np.array(x, dtype=np.float64) for x in inputs]

    def f(x):
        with T.precision(np.float64):
            args = [T.Tensor(x if i == which else v) for i, v in enumerate(inputs)]
            return fn(*args).item()

    return finite_diff_grad(f, inputs[which], h)


def assert_grads_match(fn, *inputs):
    analytic = grad_of(fn, *inputs)
    for i in range(len(inputs)):
        num = numeric_grad(fn, inputs, i)
        rel = np.abs(analytic[i] - num) / np.maximum(np.abs(num), 1e-8)
        # elements whose gradient is ~0 compare absolutely
        ok = (rel < GRAD_RTOL) | (np.abs(analytic[i] - num) < 1e-8)
        assert ok.all(), (i, analytic[i], num)


# ---------------------------------------------------------------- construction


def test_zero_dimension_rejected():
    with pytest.raises(T.DimensionError):
        T.Tensor(np.zeros((0, 3)))


def test_default_dtype_is_float32_and_shadow_mode_switches():
    assert T.Tensor([1.0]).data.dtype == np.float32
    with T.precision(np.float64):
        assert T.Tensor([1.0]).data.dtype == np.float64
    assert T.default_dtype() is np.float32


# ---------------------------------------------------------------- matmul


def test_identity_matmul():
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    out = T.matmul(T.Tensor(np.eye(2)), T.Tensor(x))
    np.testing.assert_array_equal(out.data, x)


def test_matmul_hand_value():
    out = T.Tensor([[1, 2], [3, 4]]) @ T.Tensor([[1], [1]])
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    with T.precision(np.float64):
        out = T.matmul(T.Tensor(a), T.Tensor(b)).data
    np.testing.assert_allclose(out, matmul_loops(a, b), atol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 2))))


def test_matmul_gradients_batched_and_weight():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(4, 5))
    assert_grads_match(lambda x, y: (T.matmul(x, y) * T.matmul(x, y)).sum(), a, w)
    b = rng.normal(size=(2, 4, 3))
    assert_grads_match(lambda x, y: T.sigmoid(T.matmul(x, y)).sum(), a, b)


# ---------------------------------------------------------------- elementwise


def test_sigmoid_and_swish_at_zero():
    assert T.sigmoid(T.Tensor([0.0])).data[0] == 0.5
    assert T.swish(T.Tensor([0.0])).data[0] == 0.0


def test_dropout_identities():
    x = T.Tensor(np.random.default_rng(0).normal(size=(4, 5)))
    assert T.dropout(x, 0.0, seed=1) is x
    assert T.dropout(x, 0.5, seed=1, training=False) is x


def test_dropout_rescales_survivors():
    x = T.Tensor(np.ones((200, 200)))
    y = T.dropout(x, 0.25, seed=3).data
    kept = y != 0
    np.testing.assert_allclose(y[kept], 1 / 0.75, rtol=1e-6)
    assert abs(kept.mean() - 0.75) < 0.01


def test_dropout_same_seed_same_mask():
    x = T.Tensor(np.ones((10, 10)))
    np.testing.assert_array_equal(T.dropout(x, 0.3, seed=(1, 2)).data,
                                  T.dropout(x, 0.3, seed=(1, 2)).data)


def test_elementwise_dispatch():
    a = T.Tensor([1.0, -2.0])
    np.testing.assert_array_equal(T.elementwise("relu", a).data, [1.0, 0.0])
    np.testing.assert_array_equal(T.elementwise("add", a, a).data, [2.0, -4.0])
    with pytest.raises(ValueError):
        T.elementwise("tanh", a)


def test_trailing_broadcast_only():
    T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones(3)))
    T.mul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 1))))
    with pytest.raises(T.DimensionError):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2,))))
    with pytest.raises(T.DimensionError):
        T.mul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((1, 3))))


@pytest.mark.parametrize("op", [T.sigmoid, T.swish, T.log_sigmoid])
def test_unary_gradients(op):
    x = np.random.default_rng(2).normal(size=(3, 4)) * 3
    assert_grads_match(lambda t: (op(t) * op(t)).sum(), x)


def test_relu_gradient_away_from_kink():
    x = np.array([[-1.5, 0.7], [2.0, -0.3]])
    assert_grads_match(lambda t: (T.relu(t) * t).sum(), x)


def test_broadcast_gradients():
    rng = np.random.default_rng(3)
    a, b, c = rng.normal(size=(2, 3, 4)), rng.normal(size=4), rng.normal(size=(2, 3, 1))
    assert_grads_match(lambda x, y, z: ((x + y) * z * (x - y)).sum(), a, b, c)


def test_log_sigmoid_stable_at_extremes():
    y = T.log_sigmoid(T.Tensor([-100.0, 100.0])).data
    assert np.isfinite(y).all()
    np.testing.assert_allclose(y, [-100.0, 0.0], atol=1e-6)


# ---------------------------------------------------------------- softmax / lse / layer norm


def test_softmax_uniform_row():
    np.testing.assert_allclose(T.softmax_rows(T.Tensor([[2.0, 2.0, 2.0]])).data, [[1 / 3] * 3],
                               atol=1e-7)


def test_softmax_mask_and_dead_rows():
    out = T.softmax_rows(T.Tensor([[0.0, 0.0], [1.0, 2.0]]),
                         np.array([[0.0, -np.inf], [-np.inf, -np.inf]])).data
    np.testing.assert_array_equal(out, [[1.0, 0.0], [0.0, 0.0]])


@given(arrays(np.float64, (4, 5), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(x):
    y = T.softmax_rows(T.Tensor(x)).data
    assert ((y >= 0) & (y <= 1)).all()
    np.testing.assert_allclose(y.sum(1), 1.0, atol=1e-6)


def test_softmax_gradient():
    x = np.random.default_rng(4).normal(size=(3, 5))
    w = np.random.default_rng(5).normal(size=(3, 5))
    mask = np.zeros((3, 5))
    mask[1, 2:] = -np.inf
    assert_grads_match(lambda t: (T.softmax_rows(t, mask) * T.Tensor(w)).sum(), x)


def test_logsumexp_value_and_gradient():
    x = np.array([[1000.0, 1000.0], [0.0, np.log(3.0)]])
    np.testing.assert_allclose(T.logsumexp(T.Tensor(x)).data,
                               [1000 + np.log(2), np.log(4)], rtol=1e-6)
    y = np.random.default_rng(6).normal(size=(2, 4))
    assert_grads_match(lambda t: (T.logsumexp(t) * T.logsumexp(t)).sum(), y)


def test_layer_norm_examples():
    one, zero = T.Tensor(np.ones(2)), T.Tensor(np.zeros(2))
    np.testing.assert_array_equal(T.layer_norm(T.Tensor([3.0, 3.0]), one, zero).data, [0, 0])
    np.testing.assert_allclose(T.layer_norm(T.Tensor([1.0, -1.0]), one, zero).data, [1, -1],
                               atol=1e-6)
    bias = T.Tensor([0.5, -2.0])
    np.testing.assert_array_equal(
        T.layer_norm(T.Tensor([[4.0, 1.0]]), T.Tensor(np.zeros(2)), bias).data, [[0.5, -2.0]])


def test_layer_norm_dimension_errors():
    with pytest.raises(T.DimensionError):
        T.layer_norm(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)))


@given(arrays(np.float64, (3, 6), elements=finite))
@settings(max_examples=30)
def test_layer_norm_standardizes(x):
    with T.precision(np.float64):
        y = T.layer_norm(T.Tensor(x), T.Tensor(np.ones(6)), T.Tensor(np.zeros(6))).data
    np.testing.assert_allclose(y.mean(1), 0.0, atol=1e-9)
    spread = x.std(1)
    big = spread > 1e-2
    np.testing.assert_allclose(y[big].var(1), 1.0, rtol=1e-6)


def test_layer_norm_gradient():
    rng = np.random.default_rng(7)
    x, g, b = rng.normal(size=(2, 3, 5)), rng.normal(size=5), rng.normal(size=5)
    w = rng.normal(size=(2, 3, 5))
    assert_grads_match(lambda t, gg, bb: (T.layer_norm(t, gg, bb) * T.Tensor(w)).sum(), x, g, b)


# ---------------------------------------------------------------- backward


def test_backward_sum_and_square():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Graph() as g:
        loss = x.sum()
    np.testing.assert_array_equal(T.backward(g, loss)[x], [1.0, 1.0])
    with T.Graph() as g:
        loss = (x * x).sum()
    np.testing.assert_array_equal(T.backward(g, loss)[x], [2.0, 4.0])
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Graph() as g:
        y = x * 2.0
    with pytest.raises(T.ContractError):
        T.backward(g, y)


def test_no_recording_outside_graph():
    x = T.Tensor([1.0], requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad


def test_graph_order_is_topological():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Graph() as g:
        y = T.sigmoid(x * x)
        (y + x).sum()
    seen = set()
    for node in g.nodes:
        for p in node.parents:
            if p.requires_grad and any(n.out is p for n in g.nodes):
                assert id(p) in seen
        seen.add(id(node.out))


def test_take_scatter_adds_repeated_rows():
    table = T.Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    with T.Graph() as g:
        loss = table[np.array([0, 2, 2])].sum()
    np.testing.assert_array_equal(T.backward(g, loss)[table], [[1, 1], [0, 0], [2, 2]])


def test_row_dot_gather_matches_full_product_and_gradient():
    rng = np.random.default_rng(8)
    h, table = rng.normal(size=(4, 3)), rng.normal(size=(7, 3))
    ids = rng.integers(0, 7, size=(4, 5))
    full = h @ table.T
    with T.precision(np.float64):
        out = T.row_dot_gather(T.Tensor(h), T.Tensor(table), ids).data
    np.testing.assert_allclose(out, np.take_along_axis(full, ids, 1), rtol=1e-12)
    assert_grads_match(lambda a, b: T.sigmoid(T.row_dot_gather(a, b, ids)).sum(), h, table)


def test_row_dot_gather_sparse_route_agrees(monkeypatch):
    rng = np.random.default_rng(11)
    h, table = rng.normal(size=(3, 4)), rng.normal(size=(9, 4))
    ids = rng.integers(0, 9, size=(3, 6))
    dense = grad_of(lambda a, b: T.sigmoid(T.row_dot_gather(a, b, ids)).sum(), h, table)
    monkeypatch.setattr(T, "DENSE_SCORE_LIMIT", 0)
    sparse = grad_of(lambda a, b: T.sigmoid(T.row_dot_gather(a, b, ids)).sum(), h, table)
    np.testing.assert_allclose(sparse[0], dense[0], rtol=1e-10)
    np.testing.assert_allclose(sparse[1], dense[1], rtol=1e-10)


def test_concat_reshape_transpose_gradients():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
    w = rng.normal(size=(5, 2))
    assert_grads_match(
        lambda x, y: (T.concat([x, y], -1).transpose(1, 0) * T.Tensor(w)).reshape(10).sum(), a, b)


def test_deterministic_forward_and_gradients():
    def run():
        rng = np.random.default_rng(10)
        x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = T.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        with T.Graph() as g:
            loss = T.dropout(T.swish(x @ w), 0.2, seed=5).sum()
        grads = T.backward(g, loss)
        return loss.data.copy(), grads[w].copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2
    np.testing.assert_array_equal(g1, g2)


# ---------------------------------------------------------------- serialization


def test_save_load_round_trip(tmp_path):
    arrays_in = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5], np.float32)}
    T.save_params(tmp_path / "p.bin", arrays_in, {"note": "x"})
    raw = (tmp_path / "p.bin").read_bytes()
    assert raw[:4] == b"SQRT"
    out, meta = T.load_params(tmp_path / "p.bin")
    assert meta == {"note": "x"}
    for k in arrays_in:
        np.testing.assert_array_equal(out[k], arrays_in[k])


def test_load_rejects_foreign_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        T.load_params(tmp_path / "x.bin")
