"""Small define-by-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and records the operation that produced
it.  Calling :func:`backward` on a scalar result walks the recorded graph in
reverse topological order and accumulates vector-Jacobian products into
``.grad`` of every tensor that requires a gradient.

Broadcasting follows numpy rules; gradients flowing into a broadcast operand
are summed back down to that operand's shape.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "apply",
    "backward",
    "finite_difference_gradient",
    "as_tensor",
    "OPS",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class DomainError(ValueError):
    """An op was evaluated outside its mathematical domain."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return apply("add", [self, other])

    def __radd__(self, other):
        return apply("add", [other, self])

    def __sub__(self, other):
        return apply("sub", [self, other])

    def __rsub__(self, other):
        return apply("sub", [other, self])

    def __mul__(self, other):
        return apply("mul", [self, other])

    def __rmul__(self, other):
        return apply("mul", [other, self])

    def __truediv__(self, other):
        return apply("div", [self, other])

    def __rtruediv__(self, other):
        return apply("div", [other, self])

    def __matmul__(self, other):
        return apply("matmul", [self, other])

    def __neg__(self):
        return apply("neg", [self])

    def __getitem__(self, index):
        return apply("slice", [self], index=index)

    def sum(self, axis=None, keepdims=False):
        return apply("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply("mean", [self], axis=axis, keepdims=keepdims)

    def tanh(self):
        return apply("tanh", [self])

    def sigmoid(self):
        return apply("sigmoid", [self])

    def softplus(self):
        return apply("softplus", [self])

    def exp(self):
        return apply("exp", [self])

    def log(self):
        return apply("log", [self])

    def abs(self):
        return apply("abs", [self])

    def sqrt(self):
        return apply("sqrt", [self])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", [self], shape=shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, *arrays: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*(a.shape for a in arrays))
    except ValueError:
        shapes = " vs ".join(str(a.shape) for a in arrays)
        raise ShapeError(f"{op}: cannot broadcast shapes {shapes}") from None


def _softplus(x: np.ndarray) -> np.ndarray:
    # overflow-safe form; relied on by the flow constraints at large |x|
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# Each forward returns (value, vjp) where vjp maps the upstream gradient to a
# tuple of gradients, one per input (None where no gradient is needed).


def _add(a, b):
    _broadcast_shape("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _sub(a, b):
    _broadcast_shape("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _mul(a, b):
    _broadcast_shape("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _div(a, b):
    _broadcast_shape("div", a, b)
    if np.any(b == 0):
        raise DomainError(f"div: zero in denominator of shape {b.shape}")
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


def _matmul(a, b):
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    if a.ndim > 2 or b.ndim > 2:
        raise ShapeError(f"matmul: only 1-D/2-D operands supported, got {a.shape} and {b.shape}")
    out = a @ b

    def vjp(g):
        a2 = a if a.ndim == 2 else a[None, :]
        b2 = b if b.ndim == 2 else b[:, None]
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)

    return out, vjp


def _neg(a):
    return -a, lambda g: (-g,)


def _tanh(a):
    out = np.tanh(a)
    return out, lambda g: (g * (1.0 - out * out),)


def _sigmoid_op(a):
    out = _sigmoid(a)
    return out, lambda g: (g * out * (1.0 - out),)


def _softplus_op(a):
    return _softplus(a), lambda g: (g * _sigmoid(a),)


def _exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


def _log(a):
    if np.any(a <= 0):
        raise DomainError(f"log: non-positive input (min {a.min():.3g}) of shape {a.shape}")
    return np.log(a), lambda g: (g / a,)


def _abs(a):
    return np.abs(a), lambda g: (g * np.sign(a),)


def _sqrt(a):
    if np.any(a < 0):
        raise DomainError(f"sqrt: negative input (min {a.min():.3g}) of shape {a.shape}")
    out = np.sqrt(a)

    def vjp(g):
        # subgradient 0 at the origin keeps norms differentiable through r=0
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return out, vjp


def _maximum(a, b):
    _broadcast_shape("maximum", a, b)
    take_a = a >= b
    return np.maximum(a, b), lambda g: (
        _unbroadcast(np.where(take_a, g, 0.0), a.shape),
        _unbroadcast(np.where(take_a, 0.0, g), b.shape),
    )


def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = axis if isinstance(axis, tuple) else (axis,)
    return tuple(ax % ndim for ax in axes)


def _sum(a, axis=None, keepdims=False):
    axes = _normalize_axis(axis, a.ndim)
    out = a.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, vjp


def _mean(a, axis=None, keepdims=False):
    axes = _normalize_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return out, vjp


def _concat(*arrays, axis=-1):
    ndim = arrays[0].ndim
    if any(x.ndim != ndim for x in arrays):
        raise ShapeError(f"concat: rank mismatch {[x.shape for x in arrays]}")
    ax = axis % ndim
    for x in arrays[1:]:
        if x.shape[:ax] + x.shape[ax + 1:] != arrays[0].shape[:ax] + arrays[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {[x.shape for x in arrays]} differ off axis {axis}")
    out = np.concatenate(arrays, axis=ax)
    bounds = np.cumsum([0] + [x.shape[ax] for x in arrays])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return out, vjp


def _slice(a, index=None):
    out = a[index]

    def vjp(g):
        full = np.zeros_like(a)
        np.add.at(full, index, g)
        return (full,)

    return np.array(out), vjp


def _broadcast(a, shape=None):
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot expand {a.shape} to {shape}") from None
    return out, lambda g: (_unbroadcast(g, a.shape),)


def _reshape(a, shape=None):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return out, lambda g: (g.reshape(a.shape),)


OPS: dict[str, Callable] = {
    "add": _add,
    "sub": _sub,
    "mul": _mul,
    "div": _div,
    "matmul": _matmul,
    "neg": _neg,
    "tanh": _tanh,
    "sigmoid": _sigmoid_op,
    "softplus": _softplus_op,
    "exp": _exp,
    "log": _log,
    "abs": _abs,
    "sqrt": _sqrt,
    "maximum": _maximum,
    "sum": _sum,
    "mean": _mean,
    "concat": _concat,
    "slice": _slice,
    "broadcast": _broadcast,
    "reshape": _reshape,
}


def apply(op_kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Evaluate ``op_kind`` on ``inputs`` and record it in the graph if needed.

    Non-tensor inputs are wrapped as constants.  ``attrs`` carries op options
    such as ``axis``, ``keepdims``, ``index`` or ``shape``.
    """
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    tensors = [as_tensor(x) for x in inputs]
    value, vjp = fn(*(t.data for t in tensors), **attrs)
    out = Tensor(value)
    if any(t.requires_grad for t in tensors):
        out.requires_grad = True
        out.grad = np.zeros_like(out.data)
        out.op = op_kind
        out.parents = tuple(tensors)
        out._vjp = vjp
    return out


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    return apply("concat", list(tensors), axis=axis)


def maximum(a, b) -> Tensor:
    return apply("maximum", [a, b])


def broadcast_to(a, shape) -> Tensor:
    return apply("broadcast", [a], shape=shape)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every reachable ``t``."""
    if root.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _toposort(root)
    # interior nodes get a fresh buffer; leaves keep accumulating across calls
    upstream: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        node.grad = node.grad + g if node.grad is not None else g.copy()
        if node._vjp is None:
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            upstream[key] = upstream[key] + pg if key in upstream else pg


def finite_difference_gradient(f: Callable[[Tensor], object], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``.

    ``x`` may be a Tensor that ``f`` closes over; its data is perturbed in
    place one coordinate at a time and restored afterwards.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    t = x if isinstance(x, Tensor) else Tensor(x)
    flat = t.data.reshape(-1)
    grad = np.zeros(flat.size)

    def value() -> float:
        out = f(t)
        return float(out.data) if isinstance(out, Tensor) else float(out)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = value()
        flat[i] = orig - eps
        lo = value()
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad.reshape(t.shape)
