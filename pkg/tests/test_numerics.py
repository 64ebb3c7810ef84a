import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ffcn.numerics import (
    CheckpointError, ParameterStore, ShapeError, Tensor, backward, concat, conv1d_dilated, conv_time_major,
    cross_entropy, init_mlp, matmul, mlp_forward, no_grad, read_arrays, relu, segment_sum, sgd_step, shift,
    softmax_cross_entropy, stack, take, write_arrays,
)
from ffcn.numerics.checkpoint import store_from_arrays, store_to_arrays


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + eps
        up = f()
        x.flat[i] = old - eps
        down = f()
        x.flat[i] = old
        g.flat[i] = (up - down) / (2 * eps)
    return g


# ----- matmul -------------------------------------------------------------

def test_matmul_identity_and_scalar():
    a = Tensor(np.eye(2))
    b = Tensor(np.array([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(matmul(a, b).data, b.data)
    assert matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 2))
    ref = np.zeros((4, 2))
    for i in range(4):
        for j in range(2):
            for k in range(3):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, ref, rtol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


@pytest.mark.parametrize("ashape,bshape", [((4, 3), (3, 2)), ((2, 5, 3), (3, 4)), ((2, 4, 3), (2, 3, 2)),
                                           ((3, 3), (2, 3, 2))])
def test_matmul_gradients(ashape, bshape):
    rng = np.random.default_rng(1)
    a, b = leaf(rng.standard_normal(ashape)), leaf(rng.standard_normal(bshape))
    w = rng.standard_normal(np.broadcast_shapes(ashape[:-2], bshape[:-2]) + (ashape[-2], bshape[-1]))
    loss = lambda: float(np.sum(np.matmul(a.data, b.data) * w))
    backward((matmul(a, b) * Tensor(w)).sum())
    np.testing.assert_allclose(a.grad, numeric_grad(loss, a.data), atol=1e-6)
    np.testing.assert_allclose(b.grad, numeric_grad(loss, b.data), atol=1e-6)


# ----- mlp ----------------------------------------------------------------

def test_mlp_single_affine_layer_by_hand():
    store = ParameterStore("float64")
    store.add("m.0.weight", [[2.0]])
    store.add("m.0.bias", [1.0])
    assert mlp_forward(store, "m", Tensor([3.0])).data.tolist() == [7.0]


def test_mlp_zero_weights_no_bias_gives_zero():
    store = ParameterStore("float64")
    init_mlp(store, "m", [3, 5, 2], np.random.default_rng(0), bias=False)
    for t in store.tensors():
        t.data[...] = 0
    np.testing.assert_array_equal(mlp_forward(store, "m", Tensor(np.ones((4, 3)))).data, 0)


def test_mlp_two_layers_matches_recomputation():
    rng = np.random.default_rng(2)
    store = ParameterStore("float64")
    init_mlp(store, "m", [3, 6, 2], rng)
    store["m.0.bias"].data[...] = rng.standard_normal(6)
    x = rng.standard_normal((5, 3))
    W0, b0, W1, b1 = (store[p].data for p in ("m.0.weight", "m.0.bias", "m.1.weight", "m.1.bias"))
    ref = np.maximum(x @ W0 + b0, 0) @ W1 + b1
    np.testing.assert_allclose(mlp_forward(store, "m", Tensor(x)).data, ref, rtol=1e-12)


def test_mlp_errors():
    store = ParameterStore("float64")
    init_mlp(store, "m", [3, 2], np.random.default_rng(0))
    with pytest.raises(KeyError):
        mlp_forward(store, "nope", Tensor(np.zeros(3)))
    with pytest.raises(ShapeError):
        mlp_forward(store, "m", Tensor(np.zeros(4)))


# ----- convolution --------------------------------------------------------

def conv_store(kernel, channels=1):
    store = ParameterStore("float64")
    w = np.zeros((3, channels, channels))
    for c in range(channels):
        w[:, c, c] = kernel
    store.add("c.weight", w)
    return store


def test_conv_identity_kernel():
    x = Tensor(np.array([[1.0, 2.0, 3.0, 4.0]]))
    out = conv1d_dilated(conv_store([0, 1, 0]), "c", x, 2)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_box_kernel_by_hand():
    out = conv1d_dilated(conv_store([1, 1, 1]), "c", Tensor(np.array([[1.0, 2.0, 3.0, 4.0]])), 1)
    assert out.data.tolist() == [[3.0, 6.0, 9.0, 7.0]]


def test_conv_dilation_locality():
    rng = np.random.default_rng(3)
    store = conv_store(rng.standard_normal(3))
    x = rng.standard_normal((1, 9))
    base = conv1d_dilated(store, "c", Tensor(x), 4).data
    x2 = x.copy()
    x2[0, 0] += 1.0
    changed = np.flatnonzero(conv1d_dilated(store, "c", Tensor(x2), 4).data[0] != base[0])
    assert changed.tolist() == [0, 4]


def test_conv_rejects_bad_dilation():
    with pytest.raises(ValueError):
        conv1d_dilated(conv_store([1, 1, 1]), "c", Tensor(np.zeros((1, 4))), 0)


def test_conv_matches_direct_sum_and_gradients():
    rng = np.random.default_rng(4)
    T, Ci, Co, d = 7, 3, 2, 2
    x, w, b = leaf(rng.standard_normal((2, T, Ci))), leaf(rng.standard_normal((3, Ci, Co))), leaf(rng.standard_normal(Co))
    ref = np.tile(b.data, (2, T, 1))
    for t in range(T):
        for k, off in enumerate((-d, 0, d)):
            if 0 <= t + off < T:
                ref[:, t] += x.data[:, t + off] @ w.data[k]
    out = conv_time_major(x, w, b, d)
    np.testing.assert_allclose(out.data, ref, rtol=1e-12)
    r = rng.standard_normal(ref.shape)
    backward((out * Tensor(r)).sum())
    f = lambda: float(np.sum(conv_time_major(Tensor(x.data), Tensor(w.data), Tensor(b.data), d).data * r))
    for t in (x, w, b):
        np.testing.assert_allclose(t.grad, numeric_grad(f, t.data), atol=1e-6)


# ----- cross entropy ------------------------------------------------------

def test_cross_entropy_uniform_and_stable():
    assert softmax_cross_entropy(Tensor(np.zeros(4)), 2).item() == pytest.approx(math.log(4), abs=1e-12)
    v = softmax_cross_entropy(Tensor(np.array([1000.0, 0.0])), 0).item()
    assert np.isfinite(v) and v == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_matches_high_precision():
    import mpmath
    rng = np.random.default_rng(5)
    z = rng.standard_normal(5) * 3
    mpmath.mp.dps = 50
    ref = -(mpmath.mpf(z[3]) - mpmath.log(sum(mpmath.exp(mpmath.mpf(v)) for v in z)))
    assert softmax_cross_entropy(Tensor(z), 3).item() == pytest.approx(float(ref), rel=1e-13)


def test_cross_entropy_errors():
    with pytest.raises(IndexError):
        softmax_cross_entropy(Tensor(np.zeros(3)), 3)
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(np.zeros((2, 1))), [0, 0])


def test_cross_entropy_gradient():
    rng = np.random.default_rng(6)
    z = leaf(rng.standard_normal((3, 4)))
    y = np.array([0, 3, 1])
    backward(cross_entropy(z, y).sum())
    f = lambda: float(cross_entropy(Tensor(z.data), y).data.sum())
    np.testing.assert_allclose(z.grad, numeric_grad(f, z.data), atol=1e-7)


# ----- backward -----------------------------------------------------------

def test_backward_square_sum():
    w = leaf([1.0, 2.0])
    backward((w * w).sum())
    assert w.grad.tolist() == [2.0, 4.0]


def test_backward_unreached_param_gets_zero():
    w, p = leaf([1.0, 2.0]), leaf([[3.0]])
    backward((w * w).sum(), [w, p])
    np.testing.assert_array_equal(p.grad, 0)


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        backward(leaf([1.0, 2.0]) * 2.0)


def test_no_grad_builds_no_tape():
    w = leaf([1.0])
    with no_grad():
        y = w * 3.0
    assert not y.requires_grad


def test_shared_subexpression_accumulates():
    x = leaf([1.5, -2.0])
    y = relu(x) * x + x
    backward(y.sum())
    np.testing.assert_allclose(x.grad, [2 * 1.5 + 1, 1.0])


def test_take_concat_stack_shift_gradients():
    rng = np.random.default_rng(7)
    a = leaf(rng.standard_normal((3, 5, 2)))
    idx = np.array([4, 0, 0, 2])
    r = rng.standard_normal((3, 4 + 5, 2, 2))

    def build(t):
        tk = take(t, idx, axis=1)
        cat = concat([tk, shift(t, 2, axis=1)], axis=1)
        return stack([cat, cat * 2.0], axis=-1)
    backward((build(a) * Tensor(r)).sum())
    f = lambda: float(np.sum(build(Tensor(a.data)).data * r))
    np.testing.assert_allclose(a.grad, numeric_grad(f, a.data), atol=1e-6)


def test_shift_zero_fills():
    x = Tensor(np.array([1.0, 2.0, 3.0]))
    # out[t] = x[t + offset]
    assert shift(x, 1, axis=0).data.tolist() == [2.0, 3.0, 0.0]
    assert shift(x, -2, axis=0).data.tolist() == [0.0, 0.0, 1.0]


@settings(max_examples=30, deadline=None)
@given(st.permutations(range(6)), st.integers(0, 2 ** 16))
def test_segment_sum_is_order_invariant(perm, seed):
    rng = np.random.default_rng(seed)
    vals = rng.standard_normal((6, 3)) * 10 ** rng.uniform(-3, 3, size=(6, 1))
    ids = np.array([0, 1, 0, 2, 0, 1])
    perm = np.array(perm)
    a = segment_sum(Tensor(vals), ids, 3, axis=0).data
    b = segment_sum(Tensor(vals[perm]), ids[perm], 3, axis=0).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a[0], vals[[0, 2, 4]].sum(axis=0), rtol=1e-12)


# ----- sgd ----------------------------------------------------------------

def test_sgd_step_by_hand():
    store = ParameterStore("float64")
    w = store.add("w", [1.0])
    w.grad = np.array([1.0])
    sgd_step(store, 0.1)
    assert store.velocity["w"][0] == pytest.approx(1.0001, abs=1e-15)
    assert w.data[0] == pytest.approx(0.89999, abs=1e-15)
    assert w.grad is None and store.step_count == 1


def test_sgd_zero_grad_only_decays():
    store = ParameterStore("float64")
    w = store.add("w", [2.0, -1.0])
    w.grad = np.zeros(2)
    sgd_step(store, 0.5)
    np.testing.assert_allclose(w.data, [2.0 - 0.5 * 2e-4, -1.0 + 0.5 * 1e-4])


def test_sgd_missing_grad_raises():
    store = ParameterStore("float64")
    store.add("w", [1.0])
    with pytest.raises(RuntimeError, match="missing gradient"):
        sgd_step(store, 0.1)


def test_sgd_identical_stores_bitwise_equal():
    rng = np.random.default_rng(8)
    w0, g = rng.standard_normal(5).astype(np.float32), rng.standard_normal(5).astype(np.float32)
    outs = []
    for _ in range(2):
        store = ParameterStore("float32")
        t = store.add("w", w0)
        for _ in range(3):
            t.grad = g.copy()
            sgd_step(store, 0.05)
        outs.append(t.data.tobytes())
    assert outs[0] == outs[1]


def test_store_path_set_stable_and_precision_flag():
    store = ParameterStore("float32")
    init_mlp(store, "m", [2, 3], np.random.default_rng(0))
    before = store.paths()
    for t in store.tensors():
        t.grad = np.ones_like(t.data)
    sgd_step(store, 0.1)
    assert store.paths() == before
    assert all(t.data.dtype == np.float32 for t in store.tensors())
    with pytest.raises(ValueError):
        ParameterStore("float16")


# ----- checkpoint container -----------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    store = ParameterStore("float32")
    init_mlp(store, "m", [3, 4, 2], np.random.default_rng(0))
    store.velocity["m.0.weight"] += 0.5
    store.step_count = 7
    arrays = store_to_arrays(store)
    arrays["meta/ints"] = np.arange(3, dtype=np.int64)
    write_arrays(tmp_path / "a.ckpt", arrays)
    raw = (tmp_path / "a.ckpt").read_bytes()
    assert raw[:4] == b"FFCN" and int.from_bytes(raw[4:8], "little") == 1
    back = read_arrays(tmp_path / "a.ckpt")
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype and back[k].tobytes() == arrays[k].tobytes()
    restored = store_from_arrays(back)
    assert restored.step_count == 7 and restored.precision == "float32"
    np.testing.assert_array_equal(restored.velocity["m.0.weight"], store.velocity["m.0.weight"])


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(CheckpointError):
        read_arrays(tmp_path / "bad")
    write_arrays(tmp_path / "ok", {"x": np.zeros(4)})
    data = (tmp_path / "ok").read_bytes()
    (tmp_path / "short").write_bytes(data[:-3])
    with pytest.raises(CheckpointError):
        read_arrays(tmp_path / "short")
