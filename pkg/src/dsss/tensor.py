"""Dense 4-D tensors with reverse-mode differentiation.

Every tensor is ``[batch, channel, height, width]`` in float64. Operations that
touch a tensor with ``requires_grad`` record a node (parents + a vector-Jacobian
closure); :func:`backward` walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when tensor extents are inconsistent with an operation."""


class ValidationError(ValueError):
    """Raised when input values violate a precondition."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, finite differences)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim != 4:
            raise ShapeError(f"expected a 4-D [B,C,H,W] array, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def at(self, b: int, c: int, h: int, w: int) -> float:
        return float(self.data[b, c, h, w])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> dict[Tensor, np.ndarray]:
        return backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    __hash__ = object.__hash__

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __abs__(self):
        return absolute(self)


def from_op(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``vjp(g)`` must return one gradient (or ``None``) per parent, shaped like
    that parent.
    """
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full((1, 1, 1, 1), float(x)))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# construction


def tensor_new(shape: Sequence[int], values: Iterable[float], requires_grad: bool = False) -> Tensor:
    """Build a tensor from a flat row-major value sequence."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or any(s < 0 for s in shape):
        raise ShapeError(f"shape must be 4 non-negative extents, got {shape}")
    arr = np.array(list(values), dtype=DTYPE)
    if arr.size != int(np.prod(shape)):
        raise ShapeError(f"{arr.size} values cannot fill shape {shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("tensor values must be finite")
    return Tensor(arr.reshape(shape), requires_grad=requires_grad)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape)))


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


def scalar(value: float, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), float(value)), requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return from_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return from_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return from_op(ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return from_op(out, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return from_op(a.data * s, (a,), lambda g: (g * s,))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return from_op(np.abs(a.data), (a,), lambda g: (g * sign,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Checked entry point for add/sub/mul/abs/scale.

    Binary tensor operands must match ``a`` exactly or differ only by a
    singleton channel axis, which is repeated across ``a``'s channels.
    """
    if op == "abs":
        return absolute(a)
    if op == "scale":
        if isinstance(b, Tensor):
            raise ValidationError("scale takes a real factor, not a tensor")
        return scale(a, b)
    if op not in _ELEMENTWISE:
        raise ValidationError(f"unknown elementwise op {op!r}")
    if isinstance(b, Tensor) and b.shape != a.shape:
        if not (b.shape[1] == 1 and b.shape[0] == a.shape[0] and b.shape[2:] == a.shape[2:]):
            raise ShapeError(f"cannot broadcast {b.shape} against {a.shape}")
    return _ELEMENTWISE[op](a, b)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return from_op(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return from_op(out, (a,), lambda g: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return from_op(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    # np.maximum propagates NaN, so divergence stays visible downstream
    return from_op(np.maximum(a.data, 0.0), (a,), lambda g: (g * keep,))


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)``; gradient flows only where ``a > floor``."""
    keep = a.data > floor
    return from_op(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions and layout


def _axes(axes) -> tuple[int, ...]:
    if axes is None:
        return (0, 1, 2, 3)
    if isinstance(axes, int):
        return (axes,)
    return tuple(axes)


def sum(a: Tensor, axes=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    ax = _axes(axes)
    shape = a.shape
    return from_op(a.data.sum(axis=ax, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape),))


def mean(a: Tensor, axes=None) -> Tensor:
    ax = _axes(axes)
    shape = a.shape
    n = int(np.prod([shape[i] for i in ax]))
    return from_op(
        a.data.mean(axis=ax, keepdims=True), (a,), lambda g: (np.broadcast_to(g / n, shape),)
    )


def crop(a: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    shape = a.shape
    sl = (slice(None), slice(None), slice(top, top + height), slice(left, left + width))

    def vjp(g):
        full = np.zeros(shape)
        full[sl] = g
        return (full,)

    return from_op(a.data[sl].copy(), (a,), vjp)


def spatial_linear(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply fixed linear maps along height and width: ``rows @ a[b,c] @ cols.T``."""
    out = rows @ a.data @ cols.T
    return from_op(out, (a,), lambda g: (rows.T @ g @ cols,))


# ---------------------------------------------------------------------------
# normalizing maps


def softmax_spatial(t: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the H·W positions of every (b, c) plane.

    With ``mask`` (boolean ``[B,1,H,W]``) only masked positions take part;
    the rest are 0, and a batch item with an empty mask yields all zeros.
    """
    x = t.data
    B, C, H, W = x.shape
    if mask is None:
        m = np.ones((B, 1, H, W), dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != (B, 1, H, W):
            raise ShapeError(f"mask shape {m.shape} does not match [B,1,H,W]={(B, 1, H, W)}")
    m = np.broadcast_to(m, x.shape)
    masked = np.where(m, x, -np.inf)
    peak = masked.max(axis=(2, 3), keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.where(m, np.exp(np.where(m, x - peak, 0.0)), 0.0)
    total = e.sum(axis=(2, 3), keepdims=True)
    out = e / np.where(total > 0, total, 1.0)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=(2, 3), keepdims=True)),)

    return from_op(out, (t,), vjp)


def softmax_channels(t: Tensor) -> Tensor:
    x = t.data
    e = np.exp(x - x.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return from_op(out, (t,), vjp)


def conv1x1(t: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Single-channel 1x1 convolution: ``weight * t + bias`` with scalar parameters."""
    if t.shape[1] != 1:
        raise ShapeError(f"conv1x1 expects 1 input channel, got {t.shape[1]}")
    if weight.shape != (1, 1, 1, 1) or bias.shape != (1, 1, 1, 1):
        raise ShapeError("conv1x1 weight and bias must be [1,1,1,1] scalars")
    return add(mul(t, weight), bias)


# ---------------------------------------------------------------------------
# differentiation


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode pass from a scalar loss.

    Sets ``.grad`` on every ``requires_grad`` leaf reached and returns the
    same gradients keyed by leaf. Each graph node is visited exactly once.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward needs a [1,1,1,1] loss, got {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1, 1, 1))}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            g = np.array(g, dtype=DTYPE)
            node.grad = g
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-6) -> Tensor:
    """Central-difference gradient of a scalar function at ``x``."""
    if eps <= 0:
        raise ValidationError("eps must be positive")
    base = x.data
    flat = base.reshape(-1)
    grad = np.zeros(flat.size)

    def value(arr: np.ndarray) -> float:
        out = f(Tensor(arr.reshape(base.shape)))
        return out.item() if isinstance(out, Tensor) else float(out)

    with no_grad():
        for i in range(flat.size):
            probe = flat.copy()
            probe[i] = flat[i] + eps
            hi = value(probe)
            probe[i] = flat[i] - eps
            lo = value(probe)
            grad[i] = (hi - lo) / (2.0 * eps)
    return Tensor(grad.reshape(base.shape))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error: ``max|a-n| / max(max|a|, max|n|)``.

    Element-wise ratios are dominated by near-zero entries whose finite
    difference is pure round-off, so the scale is taken over the whole tensor.
    """
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    scale_ = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale_ == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale_)
