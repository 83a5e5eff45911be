import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from m2repa import align as al
from m2repa import numcore as nc
from m2repa.numcore import NonFiniteError, ShapeError, TapeError, Tensor

from oracles import central_difference, hsic_cka


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float32), requires_grad=grad)


def test_elementwise_examples():
    assert np.array_equal(nc.add(t([1, 2]), t([3, 4])).data, [4, 6])
    assert np.array_equal(nc.mul(t([2, 3]), 0.0).data, [0, 0])
    x = t(np.random.default_rng(0).normal(size=5))
    assert np.array_equal(nc.sub(x, x).data, np.zeros(5))


def test_matmul_examples():
    M = t([[1, 2], [3, 4]])
    assert np.array_equal(nc.matmul(t(np.eye(2)), M).data, M.data)
    assert np.array_equal(nc.matmul(M, t([[1], [1]])).data, [[3], [7]])
    assert np.array_equal(nc.matmul(t(np.zeros((2, 2))), M).data, np.zeros((2, 2)))


def test_matmul_associativity():
    rng = np.random.default_rng(3)
    A, B, C = (t(rng.normal(size=(8, 8))) for _ in range(3))
    left = nc.matmul(A, nc.matmul(B, C)).data.astype(np.float64)
    right = nc.matmul(nc.matmul(A, B), C).data.astype(np.float64)
    assert np.linalg.norm(left - right) / np.linalg.norm(right) < 1e-4


def test_matmul_shape_errors():
    with pytest.raises(ShapeError, match="inner dimensions"):
        nc.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="broadcast"):
        nc.add(t(np.ones((2, 3))), t(np.ones((4,))))


def test_grad_examples():
    x = t([1.0, 2.0], grad=True)
    (g,) = nc.grad(nc.sum(x * x), [x])
    assert np.allclose(g.data, [2.0, 4.0])

    u = t([0.3, -1.2, 2.0], grad=True)
    (g,) = nc.grad(al.token_cosine(u, u), [u])
    assert np.abs(g.data).max() < 1e-6


def test_gradient_accumulates_over_two_consumers():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=6)
    with nc.precision(np.float64):
        x = Tensor(x0, requires_grad=True)
        y = nc.exp(x) * 0.5 + nc.sum(x * x) * x
        (g,) = nc.grad(nc.sum(y), [x])

    def f(v):
        return float(np.sum(0.5 * np.exp(v) + np.sum(v * v) * v))

    assert np.allclose(g.data, central_difference(f, x0, 1e-5), rtol=1e-6, atol=1e-8)


def test_every_input_gets_a_gradient_once():
    a = t([1.0, 2.0], grad=True)
    b = t([3.0, 4.0], grad=True)
    c = t([5.0, 6.0], grad=True)
    out = nc.sum(a * b + b * c)
    ga, gb, gc = nc.grad(out, [a, b, c])
    assert np.allclose(ga.data, b.data)
    assert np.allclose(gb.data, a.data + c.data)
    assert np.allclose(gc.data, b.data)
    # a second replay of the same tape gives the same answer
    ga2, gb2, gc2 = nc.grad(out, [a, b, c])
    assert np.array_equal(gb.data, gb2.data)


def test_grad_rejects_unused_and_non_scalar():
    a = t([1.0], grad=True)
    b = t([2.0], grad=True)
    out = nc.sum(a * 3.0)
    with pytest.raises(TapeError, match="not on the tape"):
        nc.grad(out, [b])
    assert nc.grad(out, [b], allow_unused=True) == [None]
    c = t([1.0, 2.0], grad=True)
    with pytest.raises(TapeError, match="scalar"):
        nc.grad(c * 2.0, [c])


def test_non_finite_raises_immediately():
    with pytest.raises(NonFiniteError, match="log"):
        nc.log(t([0.0, 1.0]))
    with pytest.raises(NonFiniteError, match="div"):
        nc.div(t([1.0]), t([0.0]))
    with pytest.raises(NonFiniteError):
        nc.exp(t([1000.0]))


def test_no_grad_records_nothing():
    x = t([1.0, 2.0], grad=True)
    with nc.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_zero_dim_reductions_keep_shape():
    x = t(np.arange(4.0), grad=True)
    s = nc.sum(x)
    assert s.shape == ()
    (g,) = nc.grad(s, [x])
    assert np.array_equal(g.data, np.ones(4))


# ---------------------------------------------------------------- finite_diff_check


def test_finite_diff_check_examples():
    rng = np.random.default_rng(0)
    x = rng.normal(size=8)
    assert nc.finite_diff_check(lambda v: nc.sum(v * v), x) < 1e-4
    assert nc.finite_diff_check(lambda v: Tensor(np.float64(3.0)) + 0.0 * nc.sum(v), x) == 0.0
    Y = rng.normal(size=(16, 5))
    X = rng.normal(size=(16, 4))
    assert nc.finite_diff_check(lambda v: al.linear_cka(v, Tensor(Y)), X) < 1e-3


def test_finite_diff_check_catches_a_wrong_gradient(monkeypatch):
    orig = nc.exp

    def bad_exp(a):
        out = orig(a)
        back = out._backward
        if back is not None:
            out._backward = lambda g: tuple(1.01 * x for x in back(g))
        return out

    monkeypatch.setattr(nc, "exp", bad_exp)
    x = np.random.default_rng(0).normal(size=6)
    err = nc.finite_diff_check(lambda v: nc.sum(nc.exp(v)), x)
    assert err > 5e-3


def test_componentwise_mode_is_stricter():
    x = np.array([1.0, 1e-4])
    f = lambda v: nc.sum(v * v * v)  # noqa: E731
    assert nc.finite_diff_check(f, x, mode="componentwise") >= nc.finite_diff_check(f, x)
    with pytest.raises(ValueError, match="mode"):
        nc.finite_diff_check(f, x, mode="other")


def _rand(rng, shape, low=-1.5, high=1.5):
    return rng.uniform(low, high, size=shape)


PRIMITIVES = {
    "add": lambda a, b: nc.add(a, b),
    "sub": lambda a, b: nc.sub(a, b),
    "mul": lambda a, b: nc.mul(a, b),
    "div": lambda a, b: nc.div(a, nc.add(nc.mul(b, b), 0.5)),
    "pow": lambda a, b: nc.pow(nc.add(nc.mul(a, a), 0.5), 1.5),
    "exp": lambda a, b: nc.exp(a),
    "log": lambda a, b: nc.log(nc.add(nc.mul(a, a), 0.5)),
    "sqrt": lambda a, b: nc.sqrt(nc.add(nc.mul(a, a), 0.5)),
    "sum": lambda a, b: nc.sum(a, axis=0, keepdims=True),
    "mean": lambda a, b: nc.mean(a, axis=1),
    "matmul": lambda a, b: nc.matmul(a, nc.transpose(b)),
    "transpose": lambda a, b: nc.transpose(a),
    "reshape": lambda a, b: nc.reshape(a, (-1,)),
    "concat": lambda a, b: nc.concat([a, b], axis=-1),
    "split": lambda a, b: nc.split(a, [2, 4], axis=-1)[1],
    "l2_normalize": lambda a, b: nc.l2_normalize(a),
    "relu": lambda a, b: nc.relu(a),
    "silu": lambda a, b: nc.silu(a),
    "tanh": lambda a, b: nc.tanh(a),
    "layer_norm": lambda a, b: nc.layer_norm(a),
    "softmax": lambda a, b: nc.softmax(a),
    "take": lambda a, b: nc.take(a, [0, 2, 2], axis=0),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_in_f32(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    a0 = _rand(rng, (4, 6))
    if name == "relu":
        # keep every element away from the kink at 0
        a0 = np.sign(a0) * (np.abs(a0) + 0.1)
    b = Tensor(_rand(rng, (4, 6)).astype(np.float32))
    op = PRIMITIVES[name]
    probe = op(Tensor(a0.astype(np.float32)), b)
    w = Tensor(rng.normal(size=probe.shape).astype(np.float32))

    def f(a):
        bb = Tensor(b.data.astype(a.dtype))
        return nc.sum(op(a, bb) * Tensor(w.data.astype(a.dtype)))

    err = nc.finite_diff_check(f, a0, h=1e-3, dtype=np.float32)
    assert err < 1e-3, f"{name}: {err}"


def test_conv3d_gradient():
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(1, 2, 3, 3, 3))
    w = Tensor(rng.normal(size=(2, 2, 3, 3, 3)))
    probe = rng.normal(size=(1, 2, 3, 3, 3))
    with nc.precision(np.float64):
        err_x = nc.finite_diff_check(lambda v: nc.sum(nc.conv3d(v, Tensor(w.data)) * Tensor(probe)), x0)
        err_w = nc.finite_diff_check(
            lambda v: nc.sum(nc.conv3d(Tensor(x0), v) * Tensor(probe)), w.data.astype(np.float64),
            coords=range(0, 108, 7))
    assert err_x < 1e-6 and err_w < 1e-6


def test_total_loss_gradient_three_parameter_toy():
    # theta = (a, b, c); "features" depend on theta so all three terms are live
    rng = np.random.default_rng(11)
    base = rng.normal(size=(12, 4))
    target = rng.normal(size=(12, 4))
    theta0 = np.array([0.7, -0.4, 1.3])

    def loss(theta: Tensor):
        a, b, c = nc.split(theta, [1, 1, 1])
        h1 = Tensor(base) * a + b
        h2 = nc.tanh(Tensor(base) * c) + Tensor(base[::-1].copy()) * b
        h3 = Tensor(base) * (a * c)
        fm = nc.mean((h1 - Tensor(target)) ** 2.0)
        feats = [nc.reshape(h, (3, 4, 4)) for h in (h1, h2, h3)]
        tg = [target.reshape(3, 4, 4)] * 3
        return al.total_loss(fm, al.m2repa_loss(feats, tg), al.decouple_loss(feats)).tensor

    assert nc.finite_diff_check(loss, theta0, h=1e-3, mode="componentwise") < 1e-3


def test_cka_hsic_oracle_through_numcore():
    rng = np.random.default_rng(2)
    X, Y = rng.normal(size=(8, 4)), rng.normal(size=(8, 5))
    with nc.precision(np.float64):
        assert abs(al.linear_cka(Tensor(X), Tensor(Y)).item() - hsic_cka(X, Y)) < 1e-10


# ---------------------------------------------------------------- properties


finite = st.floats(-10, 10, allow_nan=False, width=32)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=finite))
def test_shape_product_matches_data_length(arr):
    x = Tensor(arr)
    for y in (x * 2.0, nc.transpose(x), nc.reshape(x, (-1,)), nc.sum(x, axis=0)):
        assert int(np.prod(y.shape)) == y.data.size
        assert np.isfinite(y.data).all()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=finite),
       st.integers(0, 1))
def test_broadcast_gradient_sums_over_expanded_axes(arr, axis):
    row_shape = (1, arr.shape[1]) if axis == 0 else (arr.shape[0], 1)
    b = Tensor(np.ones(row_shape, dtype=np.float32), requires_grad=True)
    (g,) = nc.grad(nc.sum(Tensor(arr) * b), [b])
    assert np.allclose(g.data, arr.sum(axis=axis, keepdims=True), rtol=1e-5, atol=1e-4)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite))
def test_l2_normalize_rows_are_unit_or_zero(arr):
    out = nc.l2_normalize(Tensor(arr)).data
    norms = np.linalg.norm(out.astype(np.float64), axis=-1)
    raw = np.linalg.norm(arr.astype(np.float64), axis=-1)
    for n, r in zip(norms, raw):
        assert (abs(n - 1) < 1e-5) if r >= 1e-8 else n == 0


def test_cast_round_trips_gradient_dtype():
    x = Tensor(np.array([1.5, -2.0], dtype=np.float32), requires_grad=True)
    y = nc.cast(x, np.float64)
    assert y.dtype == np.float64 and np.array_equal(y.data, [1.5, -2.0])
    (g,) = nc.grad(nc.sum(y * y), [x])
    assert g.dtype == np.float32 and np.array_equal(g.data, [3.0, -4.0])
