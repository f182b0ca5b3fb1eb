import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_gradients
from motiongen import tensor as T
from motiongen.tensor import NumericError, RngStream, Tape, Tensor


def rand(rng, *shape):
    return rng.standard_normal(shape)


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        a = rand(rng, 3, 3)
        out = T.matmul(Tensor(np.eye(3)), Tensor(a))
        np.testing.assert_allclose(out.data, a, rtol=1e-6)

    def test_hand_2x2(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[1.0], [1.0]])
        np.testing.assert_allclose(T.matmul(a, b).data, [[3.0], [7.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_grad_vs_finite_differences_32bit(self):
        # relative error < 1e-3 when run at default (float32) precision
        rng = np.random.default_rng(1)
        a32 = rand(rng, 3, 4).astype(np.float32)
        b32 = rand(rng, 4, 2).astype(np.float32)
        at = Tensor(a32, requires_grad=True)
        bt = Tensor(b32)
        out = T.tsum(T.matmul(at, bt))
        tape = Tape()
        tape.backward(out)
        ga = tape.grad(at)

        def f(a):
            return float((a @ b32.astype(np.float64)).sum())

        step = 1e-3
        num = np.zeros_like(a32, dtype=np.float64)
        a64 = a32.astype(np.float64)
        for idx in np.ndindex(a64.shape):
            orig = a64[idx]
            a64[idx] = orig + step
            hi = f(a64)
            a64[idx] = orig - step
            lo = f(a64)
            a64[idx] = orig
            num[idx] = (hi - lo) / (2 * step)
        rel = np.abs(ga - num) / np.maximum(np.abs(num), 1e-3)
        assert rel.max() < 1e-3


class TestElementwise:
    def test_softmax_uniform(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=1e-6)

    def test_softmax_overflow_safe(self):
        out = T.softmax(Tensor([1000.0, 0.0]))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-6)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        out = T.softmax(Tensor(rand(rng, 5, 7)), axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(5), rtol=1e-5)

    def test_layer_norm_constant_row_is_zero(self):
        x = Tensor(np.full((2, 8), 3.7))
        gain = Tensor(np.ones(8))
        bias = Tensor(np.zeros(8))
        out = T.layer_norm(x, gain, bias)
        np.testing.assert_allclose(out.data, np.zeros((2, 8)), atol=1e-7)

    def test_layer_norm_standardizes(self):
        rng = np.random.default_rng(3)
        x = Tensor(rand(rng, 4, 16))
        out = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
        np.testing.assert_allclose(out.data.mean(axis=-1), np.zeros(4), atol=1e-6)
        np.testing.assert_allclose(out.data.var(axis=-1), np.ones(4), rtol=1e-3)

    def test_non_finite_raises(self):
        with pytest.raises(NumericError):
            T.log(Tensor([0.0]))
        with pytest.raises(NumericError):
            T.exp(Tensor([1000.0], dtype=np.float32))


OPS = {
    "add": lambda a, b: T.tsum(T.add(a, b)),
    "sub": lambda a, b: T.tsum(T.sub(a, b)),
    "mul": lambda a, b: T.tsum(T.mul(a, b)),
    "div": lambda a, b: T.tsum(T.div(a, T.add(T.square(b), Tensor(0.5)))),
    "matmul": lambda a, b: T.tsum(T.matmul(a, b)),
}

UNARY = {
    "square": T.square,
    "exp": T.exp,
    "tanh": T.tanh,
    "gelu": T.gelu,
    "relu": T.relu,
    "softplus": T.softplus,
    "softmax": lambda a: T.softmax(a, axis=-1),
    "neg": T.neg,
    "mean": lambda a: T.tmean(a, axis=0, keepdims=True),
    "reshape": lambda a: T.reshape(a, (-1,)),
    "transpose": lambda a: T.transpose(a, (1, 0)),
    "slice": lambda a: T.slice_axis(a, 0, 1, 3),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_binary_grad_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    shapes = {"matmul": ((3, 4), (4, 2))}.get(name, ((3, 4), (3, 4)))
    a, b = rand(rng, *shapes[0]), rand(rng, *shapes[1])
    build = OPS[name]
    check_gradients(lambda x, y: build(x, y), [a, b], tol=1e-5)


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_grad_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    x = rand(rng, 4, 5) * 0.7
    build = UNARY[name]
    probe = Tensor(rand(rng, *build(Tensor(x, dtype=np.float64)).shape))
    check_gradients(lambda a: T.tsum(T.mul(build(a), probe)), [x], tol=1e-5)


def test_layer_norm_grad():
    rng = np.random.default_rng(11)
    x, g, b = rand(rng, 3, 6), rand(rng, 6), rand(rng, 6)
    w = rand(rng, 3, 6)
    check_gradients(
        lambda xs, gs, bs: T.tsum(T.mul(T.layer_norm(xs, gs, bs), Tensor(w))),
        [x, g, b],
        tol=1e-5,
    )


def test_batched_matmul_grad():
    rng = np.random.default_rng(12)
    a = rand(rng, 2, 3, 4)
    b = rand(rng, 2, 4, 5)
    check_gradients(lambda x, y: T.tsum(T.matmul(x, y)), [a, b], tol=1e-5)


def test_broadcast_weight_matmul_grad():
    rng = np.random.default_rng(13)
    a = rand(rng, 2, 3, 4)
    w = rand(rng, 4, 5)
    check_gradients(lambda x, y: T.tsum(T.matmul(x, y)), [a, w], tol=1e-5)


def test_concat_grad():
    rng = np.random.default_rng(14)
    a, b = rand(rng, 2, 3), rand(rng, 4, 3)
    w = rand(rng, 6, 3)
    check_gradients(
        lambda x, y: T.tsum(T.mul(T.concat([x, y], axis=0), Tensor(w))), [a, b], tol=1e-5
    )


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_random_shapes_grad_property(n, m, seed):
    rng = np.random.default_rng(seed)
    a = rand(rng, n, m)
    w = rand(rng, n, m)
    check_gradients(
        lambda x: T.tsum(T.mul(T.gelu(T.mul(x, x)), Tensor(w))), [a], tol=1e-5
    )


def test_grad_accumulates_on_shared_input():
    x = Tensor([2.0], requires_grad=True, dtype=np.float64)
    out = T.tsum(T.add(T.mul(x, x), x))  # d/dx (x^2 + x) = 2x + 1
    tape = Tape()
    tape.backward(out)
    np.testing.assert_allclose(tape.grad(x), [5.0])


class TestRngStream:
    def test_same_seed_same_sequence(self):
        a = RngStream(42).normal((100,))
        b = RngStream(42).normal((100,))
        np.testing.assert_array_equal(a, b)

    def test_fork_is_independent_of_parent_consumption(self):
        parent = RngStream(7)
        child_before = parent.fork(3).normal((10,))
        parent.normal((50,))
        child_after = parent.fork(3).normal((10,))
        np.testing.assert_array_equal(child_before, child_after)

    def test_forks_differ(self):
        parent = RngStream(7)
        a = parent.fork(0).normal((10,))
        b = parent.fork(1).normal((10,))
        assert not np.array_equal(a, b)

    def test_state_roundtrip(self):
        rng = RngStream(99)
        rng.normal((13,))
        rng.uniform((7,))
        state = rng.state()
        rest = RngStream.from_state(state)
        np.testing.assert_array_equal(rng.normal((20,)), rest.normal((20,)))
