"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations the forecaster needs are provided. Every op that sees an
input with ``requires_grad`` records a :class:`Node` holding a closure that maps
the output gradient to input gradients. :func:`backward` orders the recorded
graph into a :class:`Tape` and walks it once in reverse.

Storage is a C-contiguous ``numpy.ndarray`` (row-major flat buffer plus
shape). Ops never alias their inputs.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "sum",
    "mean",
    "concat",
    "reshape",
    "transpose",
    "linear",
    "layer_norm",
    "gelu",
    "softmax",
    "gather",
    "take_along",
    "scatter_add",
    "batch_gather",
    "pairwise_distance",
    "backward",
    "numerical_grad",
    "relative_error",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """n-dimensional float64 array with an optional gradient record."""

    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @classmethod
    def _result(cls, arr: np.ndarray, op: str, inputs: tuple, backward_fn) -> "Tensor":
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{op} produced a non-finite value")
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(arr, dtype=np.float64)
        out.grad = None
        out._node = None
        out.requires_grad = False
        if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._node = Node(op, inputs, backward_fn)
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a Python scalar is supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data - b.data, "sub", (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(
        ad * bd, "mul", (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(x.data * c, "scale", (x,), lambda g: (g * c,))


# ------------------------------------------------------------------ algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # one GEMM over the flattened leading axes
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return Tensor._result(out, "matmul", (a, b), back)
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return Tensor._result(out, "matmul", (a, b), back)


def _check_axis(axis, ndim, op):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"{op}: axis {ax} invalid for a {ndim}-d tensor")
    return tuple(ax % ndim for ax in axes)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _check_axis(axis, x.ndim, "sum")
    shape = x.shape

    def back(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.sum(x.data, axis=axes, keepdims=keepdims), "sum", (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _check_axis(axis, x.ndim, "mean")
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axes, keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    ax = _check_axis(axis, tensors[0].ndim, "concat")[0]
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {ax}") from None
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return Tensor._result(
        out, "concat", tuple(tensors),
        lambda g: tuple(np.split(g, bounds, axis=ax)),
    )


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {shape}") from None
    return Tensor._result(out.copy(), "reshape", (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    return Tensor._result(
        np.transpose(x.data, axes).copy(), "transpose", (x,),
        lambda g: (np.transpose(g, inverse),),
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = matmul(x, weight) if x.ndim >= 2 else reshape(matmul(reshape(x, (1, -1)), weight), (-1,))
    return out if bias is None else add(out, bias)


# -------------------------------------------------------------- nonlinear


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit (population) variance."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        g = np.asarray(g)
        gx = inv * (g - g.mean(axis=-1, keepdims=True)
                    - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        return (gx,)

    out = Tensor._result(xhat, "layer_norm", (x,), back)
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return Tensor._result(xd * cdf, "gelu", (x,), lambda g: (g * (cdf + xd * pdf),))


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax; entries where ``mask`` is False get probability 0."""
    ax = _check_axis(axis, x.ndim, "softmax")[0]
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=ax, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    denom = e.sum(axis=ax, keepdims=True)
    y = e / np.where(denom > 0, denom, 1.0)

    def back(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return Tensor._result(y, "softmax", (x,), back)


# ------------------------------------------------------------------ indexing


def gather(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Copy slices of ``x`` at ``indices`` along ``axis``; backward scatters additively."""
    idx = np.asarray(indices, dtype=np.int64)
    ax = _check_axis(axis, x.ndim, "gather")[0]
    n = x.shape[ax]
    bad = (idx < 0) | (idx >= n)
    if bad.any():
        raise IndexError(f"gather: index {int(idx[bad].flat[0])} out of range for axis of length {n}")
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[ax] = idx
        gmoved = g
        np.add.at(gx, tuple(sl), gmoved)
        return (gx,)

    return Tensor._result(np.take(x.data, idx, axis=ax), "gather", (x,), back)


def take_along(x: Tensor, indices: np.ndarray, axis: int = -1) -> Tensor:
    """``numpy.take_along_axis`` with an additive scatter in backward."""
    idx = np.asarray(indices, dtype=np.int64)
    ax = _check_axis(axis, x.ndim, "take_along")[0]
    if idx.ndim != x.ndim:
        raise ShapeError(f"take_along: indices {idx.shape} and input {x.shape} differ in rank")
    n = x.shape[ax]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take_along: index out of range for axis of length {n}")
    shape = x.shape
    idx = np.broadcast_to(idx, shape[:ax] + (idx.shape[ax],) + shape[ax + 1:])

    def back(g):
        gx = np.zeros(shape)
        _scatter_add_into(gx, idx, g, ax)
        return (gx,)

    return Tensor._result(np.take_along_axis(x.data, idx, axis=ax), "take_along", (x,), back)


def _scatter_add_into(dst: np.ndarray, idx: np.ndarray, src: np.ndarray, ax: int) -> None:
    """dst[..., idx[..., k], ...] += src[..., k, ...] along ``ax``, duplicates summed."""
    moved_dst = np.moveaxis(dst, ax, -1)
    moved_idx = np.moveaxis(idx, ax, -1)
    moved_src = np.moveaxis(src, ax, -1)
    lead = moved_dst.shape[:-1]
    n = moved_dst.shape[-1]
    rows = int(np.prod(lead)) if lead else 1
    k = moved_idx.shape[-1]
    flat_idx = (np.arange(rows)[:, None] * n + moved_idx.reshape(rows, k)).ravel()
    acc = np.bincount(flat_idx, weights=moved_src.reshape(-1), minlength=rows * n)
    moved_dst += acc.reshape(moved_dst.shape)


def scatter_add(src: Tensor, indices: np.ndarray, size: int, axis: int = -1) -> Tensor:
    """Inverse of :func:`take_along`: sum ``src`` into a zero tensor of length ``size``."""
    idx = np.asarray(indices, dtype=np.int64)
    ax = _check_axis(axis, src.ndim, "scatter_add")[0]
    if idx.shape != src.shape:
        raise ShapeError(f"scatter_add: indices {idx.shape} do not match source {src.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise IndexError(f"scatter_add: index out of range for axis of length {size}")
    shape = src.shape[:ax] + (size,) + src.shape[ax + 1:]
    out = np.zeros(shape)
    _scatter_add_into(out, idx, src.data, ax)
    return Tensor._result(
        out, "scatter_add", (src,),
        lambda g: (np.take_along_axis(g, idx, axis=ax),),
    )


def batch_gather(x: Tensor, ids: np.ndarray) -> Tensor:
    """``out[b, ..., :] = x[b, ids[b, ...], :]`` for ``x`` of shape ``(B, N, d)``."""
    ids = np.asarray(ids, dtype=np.int64)
    if x.ndim != 3 or ids.shape[0] != x.shape[0]:
        raise ShapeError(f"batch_gather: need x (B, N, d) and ids (B, ...), got {x.shape}, {ids.shape}")
    b, n, d = x.shape
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"batch_gather: index out of range for {n} rows")
    flat = (ids + n * np.arange(b).reshape((b,) + (1,) * (ids.ndim - 1))).reshape(-1)
    out = x.data.reshape(b * n, d)[flat].reshape(ids.shape + (d,))

    def back(g):
        gx = np.zeros((b * n, d))
        np.add.at(gx, flat, g.reshape(-1, d))
        return (gx.reshape(b, n, d),)

    return Tensor._result(out, "batch_gather", (x,), back)


def pairwise_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distances between rows: ``(..., m, d) x (..., n, d) -> (..., m, n)``.

    The gradient at zero distance is taken as zero.
    """
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"pairwise_distance: feature sizes differ in {a.shape} and {b.shape}")
    diff = a.data[..., :, None, :] - b.data[..., None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    safe = np.where(dist > 0, dist, 1.0)

    def back(g):
        w = np.where(dist > 0, g / safe, 0.0)[..., None] * diff
        return (_unbroadcast(w.sum(axis=-2), a.shape), _unbroadcast(-w.sum(axis=-3), b.shape))

    return Tensor._result(dist, "pairwise_distance", (a, b), back)


# ------------------------------------------------------------------ backward


@dataclass
class Tape:
    """Recorded ops of one graph in topological order (inputs before outputs)."""

    nodes: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    @classmethod
    def from_output(cls, root: Tensor) -> "Tape":
        tape = cls()
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if t._node is None:
                continue
            if expanded:
                tape.nodes.append(t._node)
                tape.outputs.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in t._node.inputs:
                if parent._node is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return tape


def backward(loss: Tensor, inputs: Iterable[Tensor] = ()) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves listed in ``inputs`` that the loss does not depend on get an
    explicit zero gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node, out in zip(reversed(tape.nodes), reversed(tape.outputs)):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for parent, pg in zip(node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    if loss._node is None and loss.requires_grad:
        loss.grad = np.ones(loss.shape) if loss.grad is None else loss.grad + 1.0
    for t in inputs:
        if t.grad is None:
            t.grad = np.zeros(t.shape)
    return tape


# ---------------------------------------------------------- gradient checks


def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``x``."""
    grad = np.zeros(x.shape)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)`` (0 when both vanish)."""
    num = float(np.linalg.norm(np.asarray(analytic) - np.asarray(numeric)))
    den = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    return 0.0 if den == 0.0 else num / den
