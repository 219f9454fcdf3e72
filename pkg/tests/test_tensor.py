import numpy as np
import pytest

from duovision import tensor as T
from duovision.errors import ConfigurationError, NumericalError, UsageError


def leaf(rng, *shape):
    return T.Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)


def test_no_tape_records_nothing():
    a = T.Tensor(np.ones((2, 2)), requires_grad=True)
    out = T.mul(a, a)
    assert out.requires_grad is False or out.grad is None
    # backward outside a tape is impossible by construction
    with pytest.raises(UsageError):
        with T.Tape() as tape:
            pass
        tape.backward(out)


def test_backward_requires_scalar():
    a = T.Tensor(np.ones((3,)), requires_grad=True)
    with T.Tape() as tape:
        out = T.mul(a, a)
        with pytest.raises(UsageError):
            tape.backward(out)


def test_fanout_accumulates():
    a = T.Tensor(np.array(3.0), requires_grad=True)
    with T.Tape() as tape:
        out = T.add(T.mul(a, a), T.mul(a, a))
        tape.backward(out)
    assert a.grad == pytest.approx(12.0)


def test_finite_check_raises():
    a = T.Tensor(np.array([1.0, 0.0]), requires_grad=True)
    with T.Tape():
        with pytest.raises(NumericalError):
            T.log_softmax(T.scale(a, np.inf), axis=-1)


def test_gradcheck_battery_core_ops():
    rng = np.random.default_rng(0)
    a, b = leaf(rng, 4, 3), leaf(rng, 4, 3)
    w = leaf(rng, 3, 5)

    def f(a, b, w):
        h = T.matmul(T.gelu(T.add(a, b)), w)
        return T.mean_(T.mul(h, h))

    assert T.gradcheck(f, [a, b, w]) < 1e-5


def test_gradcheck_broadcast_shift_scale():
    rng = np.random.default_rng(1)
    x, row = leaf(rng, 3, 4), leaf(rng, 4)

    def f(x, row):
        return T.sum_(T.scale(T.shift(T.mul(x, row), 0.5), 1.7))

    assert T.gradcheck(f, [x, row]) < 1e-5


def test_gradcheck_layernorm_softmax():
    rng = np.random.default_rng(2)
    x, g, b = leaf(rng, 5, 8), leaf(rng, 8), leaf(rng, 8)

    def f(x, g, b):
        y = T.layer_norm(x, g, b)
        return T.sum_(T.mul(T.softmax(y, axis=-1), T.log_softmax(y, axis=-1)))

    assert T.gradcheck(f, [x, g, b]) < 1e-5


def test_gather_accumulates_duplicate_rows():
    table = T.Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    ids = np.array([[1, 1, 2]])
    with T.Tape() as tape:
        out = T.sum_(T.gather(table, ids))
        tape.backward(out)
    expected = np.zeros((4, 3))
    expected[1] = 2.0
    expected[2] = 1.0
    np.testing.assert_array_equal(table.grad, expected)


def test_place_rows_gradient_routing():
    rng = np.random.default_rng(3)
    base, rows = leaf(rng, 2, 5, 3), leaf(rng, 2, 2, 3)
    pos = np.array([[1, 3], [0, 4]])

    def f(base, rows):
        merged = T.place_rows(base, rows, pos)
        return T.mean_(T.mul(merged, merged))

    assert T.gradcheck(f, [base, rows]) < 1e-5
    # overwritten base rows must get exactly zero gradient
    base32 = T.Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)
    rows32 = T.Tensor(rng.normal(size=(2, 2, 3)), requires_grad=True)
    with T.Tape() as tape:
        merged = T.place_rows(base32, rows32, pos)
        tape.backward(T.sum_(merged))
    assert np.all(base32.grad[0, [1, 3]] == 0.0)
    assert np.all(base32.grad[1, [0, 4]] == 0.0)
    assert np.all(rows32.grad == 1.0)


def test_avg_pool2d_matches_brute_force():
    rng = np.random.default_rng(4)
    for g, a, d in [(8, 2, 3), (8, 4, 5), (6, 3, 2), (12, 2, 4), (4, 4, 1)]:
        x = rng.normal(size=(2, g, g, d))
        got = T.avg_pool2d(T.Tensor(x), a).data
        want = x.reshape(2, g // a, a, g // a, a, d).mean(axis=(2, 4))
        assert np.max(np.abs(got - want)) < 1e-6


def test_avg_pool2d_rejects_indivisible_stride():
    x = T.Tensor(np.zeros((1, 6, 6, 2)))
    with pytest.raises(ConfigurationError):
        T.avg_pool2d(x, 4)


def test_avg_pool2d_gradient():
    rng = np.random.default_rng(5)
    x = leaf(rng, 2, 6, 6, 3)

    def f(x):
        y = T.avg_pool2d(x, 3)
        return T.mean_(T.mul(y, y))

    assert T.gradcheck(f, [x]) < 1e-5


def test_concat_narrow_transpose_reshape():
    rng = np.random.default_rng(6)
    a, b = leaf(rng, 3, 4), leaf(rng, 2, 4)

    def f(a, b):
        c = T.concat([a, b], axis=0)
        d = T.narrow(T.transpose(c), 1, 1, 3)
        return T.sum_(T.mul(T.reshape(d, (12,)), T.reshape(d, (12,))))

    assert T.gradcheck(f, [a, b]) < 1e-5


def test_take_along_last_gradient():
    rng = np.random.default_rng(7)
    x = leaf(rng, 2, 3, 5)
    idx = np.array([[0, 4, 2], [1, 1, 3]])

    def f(x):
        return T.mean_(T.take_along_last(T.log_softmax(x, axis=-1), idx))

    assert T.gradcheck(f, [x]) < 1e-5


def test_matmul_batched_broadcast():
    rng = np.random.default_rng(8)
    a, b = leaf(rng, 2, 3, 4, 5), leaf(rng, 5, 6)

    def f(a, b):
        return T.mean_(T.matmul(a, b))

    assert T.gradcheck(f, [a, b]) < 1e-5


def test_grads_freed_after_backward():
    a = T.Tensor(np.ones((2,)), requires_grad=True)
    with T.Tape() as tape:
        mid = T.mul(a, a)
        out = T.sum_(mid)
        tape.backward(out)
    assert mid.grad is None  # intermediates release their buffers
    assert a.grad is not None


def test_dtype_policy():
    # non-float input coerces to float32; float input keeps its precision
    assert T.Tensor(np.zeros((2, 2), dtype=np.int64)).data.dtype == np.float32
    assert T.Tensor(np.zeros((2, 2))).data.dtype == np.float64
    assert T.Tensor(np.zeros((2, 2)), dtype=np.float32).data.dtype == np.float32
