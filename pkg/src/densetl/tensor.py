"""Dense float32 tensors with reverse-mode differentiation.

Every differentiable operation produces a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
:func:`backward` walks that graph in reverse topological order.

Layout is row-major, and image tensors are NCHW throughout the package.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf from its inputs."""


class Tensor:
    """An n-dimensional array that can take part in gradient computation.

    ``data`` is stored as float32 unless another dtype is requested
    explicitly (``grad_check`` probes in float64).
    """

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.array(data, dtype=dtype or DTYPE, copy=True)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return _wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def _wrap(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.name = None
    t._parents = ()
    t._backward = None
    return t


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(
    op: str,
    out: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap an op result, checking finiteness and recording it for backward."""
    out = np.asarray(out)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op}: non-finite value in output of shape {out.shape}")
    t = _wrap(out)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    return make_op(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    return make_op(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul_elementwise", a, b)
    return make_op(
        "mul_elementwise", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return make_op("scalar_mul", a.data * s, (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ ({a.shape[1]} vs {b.shape[0]})")
    return make_op(
        "matmul", a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return make_op("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op("reduce_sum", out, (a,), grad)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    out = a.data.mean(axis=axes, keepdims=keepdims)
    scale = a.data.dtype.type(1.0 / count)

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * scale, a.shape).copy(),)

    return make_op("reduce_mean", out, (a,), grad)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors (or N×C matrices) along axis 1."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_channels: no inputs")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:1] + t.shape[2:] != ref[:1] + ref[2:]:
            raise ShapeError(
                f"concat_channels: non-channel dims differ ({ref} vs {t.shape})"
            )
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)
    return make_op(
        "concat_channels", out, tensors,
        lambda g: [g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors))],
    )


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"slice_channels: range [{start}, {stop}) outside {a.shape[1]} channels")

    def grad(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return make_op("slice_channels", a.data[:, start:stop], (a,), grad)


_PRIMITIVES = {
    "add": lambda xs, **kw: add(*xs),
    "sub": lambda xs, **kw: sub(*xs),
    "mul_elementwise": lambda xs, **kw: mul(*xs),
    "scalar_mul": lambda xs, scalar: scalar_mul(xs[0], scalar),
    "matmul": lambda xs, **kw: matmul(*xs),
    "reshape": lambda xs, shape: reshape(xs[0], shape),
    "reduce_sum": lambda xs, axis=None, keepdims=False: reduce_sum(xs[0], axis, keepdims),
    "reduce_mean": lambda xs, axis=None, keepdims=False: reduce_mean(xs[0], axis, keepdims),
    "concat_channels": lambda xs, **kw: concat_channels(xs),
}


def primitive_forward(op_kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``primitive_forward("reshape", [x], shape=(2, 3))``."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    return fn(list(inputs), **attrs)


# ---------------------------------------------------------------------------
# reverse mode
# ---------------------------------------------------------------------------

class Tape:
    """Topologically ordered record of the ops that produced a loss."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is None and n.requires_grad]

    def __len__(self) -> int:
        return len(self.nodes)


class Gradients:
    """Mapping ``Tensor -> Tensor`` of gradients, keyed by parameter identity."""

    def __init__(self):
        self._items: dict[int, tuple[Tensor, Tensor]] = {}

    def __getitem__(self, key: Tensor) -> Tensor:
        return self._items[id(key)][1]

    def __setitem__(self, key: Tensor, value: Tensor) -> None:
        self._items[id(key)] = (key, value)

    def __contains__(self, key) -> bool:
        return id(key) in self._items

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return (k for k, _ in self._items.values())

    def items(self) -> list[tuple[Tensor, Tensor]]:
        return list(self._items.values())


def backward(
    loss: Tensor,
    params: Optional[Iterable[Tensor]] = None,
    retain_graph: bool = False,
) -> Gradients:
    """Return d(loss)/d(p) for each parameter.

    With ``params=None`` every leaf on the tape that requires a gradient is
    returned. Parameters the loss does not depend on get zero gradients.
    The graph is released afterwards unless ``retain_graph`` is set.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is detached from the tape (no input requires grad)")

    tape = Tape.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg

    targets = tape.leaves() if params is None else list(params)
    out = Gradients()
    for p in targets:
        g = grads.get(id(p))
        out[p] = _wrap(np.zeros_like(p.data) if g is None else g)

    if not retain_graph:
        for node in tape.nodes:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
    return out


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

class GradientCheckError(AssertionError):
    pass


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-3,
    tol: Optional[float] = None,
    exclude: Optional[np.ndarray] = None,
) -> float:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    The probe runs in float64 so the comparison measures the analytic gradient
    rather than float32 roundoff in ``f``. Coordinates flagged in ``exclude``
    (e.g. within reach of a ReLU kink) are skipped.

    Returns max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    Raises :class:`GradientCheckError` if ``tol`` is given and exceeded.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True, dtype=np.float64)
    out = f(xt)
    if out.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    analytic = backward(out, [xt])[xt].data.astype(np.float64).reshape(-1)

    flat = x0.reshape(-1)
    numeric = np.zeros_like(flat)
    if exclude is None:
        skip = np.zeros(flat.size, dtype=bool)
    else:
        skip = np.asarray(exclude, dtype=bool).reshape(-1)
    for i in range(flat.size):
        if skip[i]:
            continue
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(x0, dtype=np.float64)).item()
        flat[i] = orig - eps
        fm = f(Tensor(x0, dtype=np.float64)).item()
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"grad_check: f is non-finite near coordinate {i}")
        numeric[i] = (fp - fm) / (2 * eps)

    a, n = analytic[~skip], numeric[~skip]
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    err = float(np.max(np.abs(a - n) / denom))
    if tol is not None and err > tol:
        raise GradientCheckError(f"max relative error {err:.3e} exceeds {tol:.1e}")
    return err
