import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from molgraph_uq import tensor as T
from molgraph_uq.errors import DetachedError, NotScalarError, ShapeError


def param(value):
    return T.Tensor(np.asarray(value, dtype=float), requires_grad=True)


def grad_of(fn, *params):
    with T.Tape() as tape:
        loss = fn(*params)
    return T.backward(loss, tape, params=params)


def numeric_grad(fn, x, h=1e-6):
    """Central differences of the scalar fn(x) over every entry of x."""
    out = np.zeros(x.shape)
    with T.no_grad():
        for i in range(x.value.size):
            orig = x.value.flat[i]
            x.value.flat[i] = orig + h
            up = fn(x).item()
            x.value.flat[i] = orig - h
            down = fn(x).item()
            x.value.flat[i] = orig
            out.flat[i] = (up - down) / (2 * h)
    return out


class TestForward:
    def test_matmul_identity(self):
        a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.apply("matmul", a, np.eye(2))
        np.testing.assert_array_equal(out.value, [[1, 2], [3, 4]])

    def test_softmax_symmetric(self):
        np.testing.assert_array_equal(T.apply("softmax_rows", [[0.0, 0.0]]).value, [[0.5, 0.5]])

    def test_relu(self):
        np.testing.assert_array_equal(T.apply("relu", [[-1.0, 2.0]]).value, [[0.0, 2.0]])

    def test_shape_error_reports_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))

    def test_no_row_broadcast(self):
        with pytest.raises(ShapeError):
            T.add(T.Tensor(np.ones((3, 4))), T.Tensor(np.ones((1, 4))))

    def test_scalar_broadcast(self):
        out = T.add(T.Tensor(np.ones((2, 3))), T.Tensor(2.0))
        np.testing.assert_array_equal(out.value, np.full((2, 3), 3.0))

    def test_sum_rows_masked_all_ones_is_plain_sum(self):
        x = np.random.default_rng(0).normal(size=(5, 3))
        out = T.sum_rows_masked(T.Tensor(x), np.ones(5))
        np.testing.assert_allclose(out.value, x.sum(axis=0, keepdims=True), rtol=0, atol=1e-15)

    def test_batched_matmul_matches_loop(self):
        rng = np.random.default_rng(1)
        a, w = rng.normal(size=(4, 3, 5)), rng.normal(size=(5, 2))
        out = T.matmul(T.Tensor(a), T.Tensor(w)).value
        for b in range(4):
            np.testing.assert_allclose(out[b], a[b] @ w, atol=1e-14)

    def test_sigmoid_extremes_are_finite(self):
        out = T.sigmoid(T.Tensor([[-800.0, 800.0]])).value
        assert np.all(np.isfinite(out))
        np.testing.assert_array_equal(out, [[0.0, 1.0]])


class TestBackward:
    def test_sum_all_gives_ones(self):
        w = param(np.arange(4.0).reshape(2, 2))
        g = grad_of(lambda w: T.sum_all(w), w)
        np.testing.assert_array_equal(g[w], np.ones((2, 2)))

    def test_square_gives_twice(self):
        w = param([[1.0, -2.0], [0.5, 3.0]])
        g = grad_of(lambda w: T.sum_all(T.hadamard(w, w)), w)
        np.testing.assert_allclose(g[w], 2 * w.value)

    def test_fan_out_accumulates(self):
        x = param([[3.0]])
        g = grad_of(lambda x: T.sum_all(T.add(x, x)), x)
        assert g[x][0, 0] == 2.0

    def test_unused_parameter_gets_zero(self):
        x, unused = param([[1.0, 2.0]]), param([[5.0]])
        with T.Tape() as tape:
            loss = T.sum_all(x)
        g = T.backward(loss, tape, params=(x, unused))
        np.testing.assert_array_equal(g[unused], [[0.0]])

    def test_not_scalar(self):
        x = param([[1.0, 2.0]])
        with T.Tape() as tape:
            y = T.relu(x)
        with pytest.raises(NotScalarError):
            T.backward(y, tape)

    def test_detached(self):
        x = param([[1.0]])
        loss = T.sum_all(x)  # no tape active
        with pytest.raises(DetachedError):
            T.backward(loss, T.Tape())

    def test_no_recording_outside_tape(self):
        x = param([[1.0]])
        assert not T.sum_all(x).requires_grad


def _composites():
    """(name, shape, fn) triples covering every primitive."""
    rng = np.random.default_rng(7)
    B = rng.normal(size=(3, 4))
    adj = (rng.random((3, 3)) < 0.6).astype(float)
    mask = np.array([1.0, 1.0, 0.0])
    return [
        ("matmul", (3, 3), lambda x: T.sum_all(T.matmul(x, T.Tensor(B)))),
        ("matmul_rhs", (4, 2), lambda x: T.sum_all(T.tanh(T.matmul(T.Tensor(B), x)))),
        ("add_sub", (3, 4), lambda x: T.sum_all(T.hadamard(T.sub(x, T.Tensor(B)), T.add(x, x)))),
        ("hadamard", (3, 4), lambda x: T.sum_all(T.hadamard(x, T.hadamard(x, x)))),
        ("concat", (3, 2), lambda x: T.sum_all(T.tanh(T.matmul(T.concat_cols([x, T.scale(x, 2.0)]), T.Tensor(B.T))))),
        ("transpose", (3, 4), lambda x: T.sum_all(T.matmul(T.transpose(x), T.tanh(x)))),
        ("relu", (3, 4), lambda x: T.sum_all(T.hadamard(T.relu(x), x))),
        ("tanh", (3, 4), lambda x: T.sum_all(T.tanh(x))),
        ("sigmoid", (3, 4), lambda x: T.sum_all(T.hadamard(T.sigmoid(x), x))),
        ("softmax", (3, 4), lambda x: T.sum_all(T.hadamard(T.softmax_rows(x), T.Tensor(B)))),
        ("log_softmax", (3, 4), lambda x: T.sum_all(T.hadamard(T.log_softmax_rows(x), T.Tensor(B)))),
        ("exp_log", (3, 4), lambda x: T.sum_all(T.log(T.add(T.exp(x), T.Tensor(1.0))))),
        ("sum_rows_masked", (3, 4), lambda x: T.sum_all(T.tanh(T.sum_rows_masked(x, mask)))),
        ("expand_rows", (1, 4), lambda x: T.sum_all(T.hadamard(T.expand_rows(x, 3), T.Tensor(B)))),
        ("cols", (3, 4), lambda x: T.sum_all(T.tanh(T.cols(x, 1, 3)))),
        ("scalar", (1, 1), lambda x: T.sum_all(T.hadamard(T.Tensor(B), T.sigmoid(x)))),
        ("masked_tanh", (3, 3), lambda x: T.sum_all(T.hadamard(T.masked_tanh(x, adj), x))),
    ]


@pytest.mark.parametrize("name,shape,fn", _composites(), ids=[c[0] for c in _composites()])
def test_primitive_gradients_match_finite_differences(name, shape, fn):
    # 10 random evaluation points per primitive
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(10):
        x = param(rng.normal(size=shape))
        analytic = grad_of(fn, x)[x]
        numeric = numeric_grad(fn, x)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-7)


def test_batched_ops_gradients():
    rng = np.random.default_rng(3)
    w_val = rng.normal(size=(4, 3))
    bias = rng.normal(size=(1, 3))
    h = rng.normal(size=(2, 5, 4))
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=float)

    def f(w):
        p = T.matmul(T.Tensor(h), w)
        s = T.matmul(p, T.transpose(p))
        a = T.relu(T.matmul(T.tanh(s), p))
        a = T.add(a, T.expand_rows(T.Tensor(bias), 5, batch=2))
        return T.sum_all(T.sum_rows_masked(T.sigmoid(a), mask))

    w = param(w_val)
    np.testing.assert_allclose(grad_of(f, w)[w], numeric_grad(f, w), rtol=1e-5, atol=1e-8)


def test_expand_rows_batch_gradient():
    b = param(np.random.default_rng(0).normal(size=(1, 3)))

    def f(b):
        return T.sum_all(T.tanh(T.expand_rows(b, 4, batch=2)))

    np.testing.assert_allclose(grad_of(f, b)[b], numeric_grad(f, b), rtol=1e-6)


class TestFiniteDiffCheck:
    def test_sum_of_squares(self):
        theta = param(np.random.default_rng(0).normal(size=(3, 4)))
        err = T.finite_diff_check(lambda t: T.sum_all(T.hadamard(t, t)), theta, h=1e-5)
        assert err < 1e-6

    def test_constant_function(self):
        theta = param(np.ones((2, 2)))
        assert T.finite_diff_check(lambda t: T.Tensor([[3.0]]), theta) == 0.0

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            T.finite_diff_check(lambda t: T.sum_all(t), param([[1.0]]), h=0.0)

    def test_restores_theta(self):
        theta = param([[0.3, -0.7]])
        before = theta.value.copy()
        T.finite_diff_check(lambda t: T.sum_all(T.tanh(t)), theta)
        np.testing.assert_array_equal(theta.value, before)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6))
def test_softmax_rows_sum_to_one(values):
    out = T.softmax_rows(T.Tensor([values])).value
    assert abs(out.sum() - 1.0) < 1e-12
