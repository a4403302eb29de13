import zlib

import numpy as np
import pytest

from flowseg.autodiff import (
    DomainError,
    OPS,
    ShapeError,
    Tensor,
    apply,
    backward,
    finite_difference_gradient,
)
from conftest import check_gradients, leaf


def test_add_scalars():
    assert apply("add", [Tensor(1.0), Tensor(2.0)]).item() == 3.0


def test_tanh_zero():
    assert apply("tanh", [Tensor(0.0)]).item() == 0.0


def test_matmul_hand_expansion():
    out = apply("matmul", [Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]])])
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_tanh_gradient_at_zero():
    x = Tensor(0.0, requires_grad=True)
    backward(x.tanh())
    assert x.grad == pytest.approx(1.0)


def test_accumulation_across_branches():
    x = Tensor(2.0, requires_grad=True)
    y = x * 3.0 + x.exp()  # two uses of x
    backward(y)
    assert x.grad == pytest.approx(3.0 + np.exp(2.0))


def test_backward_accumulates_across_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward((x * x).sum())
    backward((x * x).sum())
    np.testing.assert_allclose(x.grad, 2 * 2 * x.data)


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_matmul_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        apply("matmul", [Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))])


def test_broadcast_shape_error():
    with pytest.raises(ShapeError, match="add"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
    with pytest.raises(ShapeError, match="broadcast"):
        apply("broadcast", [Tensor(np.ones(3))], shape=(2, 4))


@pytest.mark.parametrize("op,val", [("log", 0.0), ("log", -1.0), ("sqrt", -1.0)])
def test_domain_errors(op, val):
    with pytest.raises(DomainError, match=op):
        apply(op, [Tensor([1.0, val])])


def test_div_by_zero():
    with pytest.raises(DomainError, match="div"):
        Tensor(1.0) / Tensor(0.0)


def test_softplus_is_overflow_safe():
    x = Tensor([-1000.0, 0.0, 1000.0], requires_grad=True)
    y = x.softplus()
    np.testing.assert_allclose(y.data, [0.0, np.log(2.0), 1000.0])
    backward(y.sum())
    np.testing.assert_allclose(x.grad, [0.0, 0.5, 1.0])


def test_sqrt_gradient_zero_at_origin():
    x = Tensor([0.0, 4.0], requires_grad=True)
    backward(x.sqrt().sum())
    np.testing.assert_allclose(x.grad, [0.0, 0.25])


def test_finite_difference_quadratic():
    fd = finite_difference_gradient(lambda t: t * t, Tensor(3.0), 1e-5)
    assert abs(fd - 6.0) <= 1e-6


def test_finite_difference_constant():
    fd = finite_difference_gradient(lambda t: Tensor(5.0), Tensor(np.arange(4.0)), 1e-5)
    np.testing.assert_array_equal(fd, np.zeros(4))


def test_finite_difference_restores_input():
    x = Tensor(np.arange(3.0))
    finite_difference_gradient(lambda t: (t * t).sum(), x, 1e-3)
    np.testing.assert_array_equal(x.data, np.arange(3.0))


def test_determinism():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))

    def run():
        x, y = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        out = ((x @ y).tanh().softplus() * 1.7).sum()
        backward(out)
        return out.data.tobytes(), x.grad.tobytes(), y.grad.tobytes()

    assert run() == run()


def _weights(rng, shape):
    return Tensor(rng.normal(size=shape))


def _random_shape(rng, max_rank=3):
    rank = int(rng.integers(1, max_rank + 1))
    return tuple(int(n) for n in rng.integers(1, 4, size=rank))


def _case(op, rng):
    """Random inputs for ``op`` and a scalar-valued closure over them."""
    shape = _random_shape(rng)
    if op in ("add", "sub", "mul", "div", "maximum"):
        a = leaf(rng, shape)
        # broadcast the second operand along a random subset of axes
        bshape = tuple(1 if rng.random() < 0.3 else n for n in shape)
        if op == "div":
            b = Tensor(rng.uniform(0.5, 2.0, size=bshape) * rng.choice([-1, 1], size=bshape),
                       requires_grad=True)
        elif op == "maximum":
            b = leaf(rng, shape)
            gap = np.abs(a.data - b.data) < 1e-2
            b.data[gap] += 0.1
        else:
            b = leaf(rng, bshape)
        w = _weights(rng, shape)
        return [a, b], lambda: (apply(op, [a, b]) * w).sum()
    if op == "matmul":
        n, k, m = (int(v) for v in rng.integers(1, 5, size=3))
        a, b = leaf(rng, (n, k)), leaf(rng, (k, m) if rng.random() < 0.7 else (k,))
        out_shape = (n, m) if b.ndim == 2 else (n,)
        w = _weights(rng, out_shape)
        return [a, b], lambda: ((a @ b) * w).sum()
    if op in ("log", "sqrt"):
        a = leaf(rng, shape, 0.2, 3.0)
    elif op == "abs":
        a = leaf(rng, shape)
        a.data[np.abs(a.data) < 1e-2] = 0.5
    elif op == "exp":
        a = leaf(rng, shape, -2.0, 2.0)
    elif op == "softplus":
        a = leaf(rng, shape, -30.0, 30.0)
    else:
        a = leaf(rng, shape)
    if op in ("sum", "mean"):
        axis = int(rng.integers(0, a.ndim)) if rng.random() < 0.6 else None
        keep = bool(rng.random() < 0.5)
        out_shape = apply(op, [a.data], axis=axis, keepdims=keep).shape
        w = _weights(rng, out_shape)
        return [a], lambda: (apply(op, [a], axis=axis, keepdims=keep) * w).sum()
    if op == "concat":
        axis = int(rng.integers(0, len(shape)))
        other = list(shape)
        other[axis] = int(rng.integers(1, 4))
        b = leaf(rng, tuple(other))
        out_shape = apply("concat", [a.data, b.data], axis=axis).shape
        w = _weights(rng, out_shape)
        return [a, b], lambda: (apply("concat", [a, b], axis=axis) * w).sum()
    if op == "slice":
        idx = tuple(slice(int(rng.integers(0, n)), None) for n in shape)
        w = _weights(rng, a.data[idx].shape)
        return [a], lambda: (a[idx] * w).sum()
    if op == "broadcast":
        a = leaf(rng, tuple(1 if rng.random() < 0.5 else n for n in shape))
        target = (2,) + shape
        w = _weights(rng, target)
        return [a], lambda: (apply("broadcast", [a], shape=target) * w).sum()
    if op == "reshape":
        w = _weights(rng, (a.size,))
        return [a], lambda: (a.reshape(a.size) * w).sum()
    w = _weights(rng, shape)
    return [a], lambda: (apply(op, [a]) * w).sum()


@pytest.mark.parametrize("op", sorted(OPS))
def test_op_gradients_match_finite_differences(op):
    rng = np.random.default_rng(zlib.crc32(op.encode()))
    worst = -np.inf
    for _ in range(100):
        tensors, f = _case(op, rng)
        worst = max(worst, check_gradients(f, tensors))
    assert worst <= 0.0


def test_unknown_op():
    with pytest.raises(ValueError, match="unknown op"):
        apply("conv", [Tensor(1.0)])
