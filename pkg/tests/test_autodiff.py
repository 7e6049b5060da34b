"""Tape-based autodiff: primitive values, backward rules, finite-difference checks."""

import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lssd.autodiff import (
    PRIMITIVES,
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    concat,
    gather,
    get_dtype,
    gradient_check,
    precision,
    softmax,
    take,
)

TOL = 1e-4
POINTS = 100


def _rand(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def _away_from_zero(rng, *shape):
    """Values bounded away from the relu kink so central differences stay exact."""
    x = rng.uniform(0.2, 2.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x, requires_grad=True)


# Each entry builds a scalar function and its inputs from a generator.
# The scalar is a weighted sum so that every output coordinate matters.
def _weighted(out, rng):
    w = Tensor(rng.normal(size=out.shape))
    return (out * w).sum()


CASES = {
    "add": lambda r: ([_rand(r, 3, 4), _rand(r, 4)], lambda a, b: a + b),
    "sub": lambda r: ([_rand(r, 3, 4), _rand(r, 3, 1)], lambda a, b: a - b),
    "mul": lambda r: ([_rand(r, 2, 3), _rand(r, 2, 3)], lambda a, b: a * b),
    "div": lambda r: ([_rand(r, 2, 3), _rand(r, 3, positive=True)], lambda a, b: a / b),
    "neg": lambda r: ([_rand(r, 5)], lambda a: -a),
    "matmul": lambda r: ([_rand(r, 2, 3, 4), _rand(r, 4, 2)], lambda a, b: a @ b),
    "exp": lambda r: ([_rand(r, 6)], lambda a: a.exp()),
    "log": lambda r: ([_rand(r, 6, positive=True)], lambda a: a.log()),
    "tanh": lambda r: ([_rand(r, 6)], lambda a: a.tanh()),
    "relu": lambda r: ([_away_from_zero(r, 6)], lambda a: a.relu()),
    "sqrt": lambda r: ([_rand(r, 6, positive=True)], lambda a: a.sqrt()),
    "softmax": lambda r: ([_rand(r, 3, 5)], lambda a: a.softmax(axis=-1)),
    "take": lambda r: ([_rand(r, 5, 3)], lambda a: take(a, np.array([[0, 4], [4, 2]]))),
    "gather": lambda r: ([_rand(r, 2, 3, 4)], lambda a: gather(a, np.array([[0, 3, 1], [2, 2, 0]]))),
    "sum": lambda r: ([_rand(r, 3, 4)], lambda a: a.sum(axis=0)),
    "mean": lambda r: ([_rand(r, 3, 4)], lambda a: a.mean(axis=-1, keepdims=True)),
    "concat": lambda r: ([_rand(r, 2, 3), _rand(r, 1, 3)], lambda a, b: concat([a, b], axis=0)),
    "slice": lambda r: ([_rand(r, 4, 5)], lambda a: a[1:3, ::2]),
    "reshape": lambda r: ([_rand(r, 2, 6)], lambda a: a.reshape(3, 4)),
    "transpose": lambda r: ([_rand(r, 2, 3, 4)], lambda a: a.transpose(0, 2, 1)),
}


class TestPrimitiveValues:
    """Forward values on hand-checkable inputs."""

    def test_matmul_identity(self):
        out = Tensor([[1, 2], [3, 4]]) @ Tensor([[1, 0], [0, 1]])
        np.testing.assert_array_equal(out.numpy(), [[1, 2], [3, 4]])

    def test_softmax_of_equal_logits_is_uniform(self):
        np.testing.assert_allclose(softmax(Tensor([0, 0, 0, 0])).numpy(), [0.25] * 4)

    def test_sum_reduce(self):
        assert Tensor([1, 2, 3]).sum().item() == 6.0

    def test_default_dtype_is_float32(self):
        assert get_dtype() == np.float32
        assert Tensor([1.0]).data.dtype == np.float32

    def test_precision_context_switches_dtype(self):
        with precision(np.float64):
            assert Tensor([1.0]).data.dtype == np.float64
        assert Tensor([1.0]).data.dtype == np.float32

    def test_log_floor(self):
        out = Tensor([0.0, 1.0]).log(floor=1e-9)
        assert out.numpy()[0] == pytest.approx(np.log(1e-9), rel=1e-5)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
            Tensor(np.ones((2, 3))) + Tensor(np.ones(4))

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_non_finite_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([np.inf, 1.0]) * Tensor([1.0, 1.0])

    def test_overflow_reported(self):
        with pytest.raises(NonFiniteError):
            with np.errstate(over="ignore"):
                Tensor([1000.0]).exp()

    def test_every_primitive_has_a_gradient_case(self):
        assert set(PRIMITIVES) == set(CASES)


class TestBackward:
    def test_sum_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with Tape() as tape:
            y = x.sum()
        backward(tape, y)
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_square_gradient(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            y = (x * x).sum()
        backward(tape, y)
        np.testing.assert_array_equal(x.grad, [4.0])

    def test_softmax_cross_entropy_gradient(self):
        z = Tensor([0.0, 0.0], requires_grad=True)
        with Tape() as tape:
            y = -(z.softmax()[0:1].log().sum())
        backward(tape, y)
        np.testing.assert_allclose(z.grad, [-0.5, 0.5], atol=1e-7)

    def test_fan_out_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            y = (x * 2.0 + x * 5.0).sum()
        backward(tape, y)
        np.testing.assert_allclose(x.grad, [7.0])

    def test_non_scalar_root_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(TapeError):
            backward(tape, y)

    def test_root_from_other_tape_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape():
            y = x.sum()
        with Tape() as other:
            pass
        with pytest.raises(TapeError):
            backward(other, y)

    def test_nothing_recorded_without_tape(self):
        x = Tensor([1.0], requires_grad=True)
        y = (x * 3.0).sum()
        with Tape() as tape:
            pass
        assert len(tape) == 0
        with pytest.raises(TapeError):
            backward(tape, y)

    def test_constants_receive_no_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        c = Tensor([3.0, 4.0])
        with Tape() as tape:
            y = (x * c).sum()
        backward(tape, y)
        assert c.grad is None
        np.testing.assert_array_equal(x.grad, [3.0, 4.0])

    def test_tape_is_topologically_ordered(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            b = a * 2.0
            c = b.exp()
            d = (b + c).sum()
        produced = [id(op.out) for op in tape.ops]
        for i, op in enumerate(tape.ops):
            for inp in op.inputs:
                if inp._op is not None:
                    assert produced.index(id(inp)) < i
        assert tape.ops[-1].out is d

    def test_backward_is_deterministic(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(8, 8))
        grads = []
        for _ in range(2):
            x = Tensor(w, requires_grad=True)
            with Tape() as tape:
                y = (x @ x).tanh().softmax(axis=-1).log().mean()
            backward(tape, y)
            grads.append(x.grad.copy())
        assert grads[0].tobytes() == grads[1].tobytes()


class TestGradientCheck:
    def test_linear_function_is_exact(self):
        x = Tensor(np.random.default_rng(1).normal(size=5))
        assert gradient_check(lambda t: t.sum(), x) < 1e-10

    def test_quadratic(self):
        x = Tensor([1.0, 2.0, 3.0])
        assert gradient_check(lambda t: (t * t).sum(), x, step=1e-3) < 1e-6

    def test_softmax_cross_entropy(self):
        x = Tensor(np.random.default_rng(2).normal(size=8))
        assert gradient_check(lambda t: -(t.softmax()[3:4].log().sum()), x, step=1e-4) < 1e-4

    def test_point_is_restored(self):
        x = Tensor([1.0, 2.0])
        before = x.data.copy()
        gradient_check(lambda t: (t * t).sum(), x)
        assert x.data.dtype == np.float32
        np.testing.assert_array_equal(x.data, before)
        assert not x.requires_grad

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            gradient_check(lambda t: t.sum(), Tensor([1.0]), step=0)

    def test_non_finite_evaluation_raises(self):
        with pytest.raises(FloatingPointError):
            gradient_check(lambda t: t.log(), Tensor([0.0]))

    @pytest.mark.parametrize("name", sorted(CASES))
    def test_primitive_at_random_points(self, name):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        worst = 0.0
        for _ in range(POINTS):
            inputs, fn = CASES[name](rng)
            out_rng_seed = int(rng.integers(2**31))

            def f(ts, fn=fn, seed=out_rng_seed):
                return _weighted(fn(*ts), np.random.default_rng(seed))

            worst = max(worst, gradient_check(f, inputs, step=1e-4))
        assert worst < TOL, f"{name}: max relative error {worst:.3g}"


class TestInvariants:
    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
    def test_softmax_rows_sum_to_one(self, logits):
        p = softmax(Tensor(logits)).numpy()
        assert np.all(p >= 0)
        assert abs(float(p.sum()) - 1.0) < 1e-5

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 5))
    def test_grad_shape_matches_values(self, rows, cols):
        x = Tensor(np.ones((rows, cols)), requires_grad=True)
        with Tape() as tape:
            y = (x.exp() * 2.0).mean()
        backward(tape, y)
        assert x.grad.shape == x.shape
        assert np.isfinite(x.grad).all()
