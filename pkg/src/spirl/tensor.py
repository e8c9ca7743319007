"""Dense tensors with reverse-mode differentiation.

Every operation in this module takes and returns :class:`Tensor` objects whose
payload is a numpy array.  When gradient recording is enabled and at least one
input requires a gradient, the output remembers its parents together with a
closure mapping the upstream gradient to per-parent gradients.  Calling
:meth:`Tensor.backward` on a scalar walks that graph in reverse topological
order and accumulates gradients into the leaf tensors.

The ops used by the transformer stack (``linear``, ``softmax``, ``layer_norm``,
``gelu``) are fused kernels with hand-derived backward passes rather than
compositions of smaller primitives; that keeps graphs short enough to train
on a single CPU core.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "linear",
    "reshape",
    "transpose",
    "concat",
    "take",
    "gather_rows",
    "broadcast_to",
    "sum",
    "mean",
    "softmax",
    "layer_norm",
    "gelu",
    "mse",
    "check_finite",
]

_state = threading.local()
_ids = itertools.count()

GELU_C = float(np.sqrt(2.0 / np.pi))
GELU_A = 0.044715


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where a finite value is required."""


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- introspection -------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph ---------------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor that requires grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and parent.node_id not in seen:
                    stack.append((parent, False))

        pending: dict[int, np.ndarray] = {self.node_id: np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = pending.get(parent.node_id)
                pending[parent.node_id] = pg if prev is None else prev + pg

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise -------------------------------------------------------


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


# -- linear algebra ----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting on the rest)."""
    a, b = _lift(a), _lift(b)
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _node(ad @ bd, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape (..., a) and ``weight`` of shape (a, b)."""
    x = _lift(x)
    if weight.ndim != 2:
        raise ValueError(f"linear: weight must be 2-D, got {weight.shape}")
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(
            f"linear: input width {x.shape[-1]} does not match weight rows {weight.shape[0]} "
            f"(x {x.shape}, W {weight.shape})"
        )
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
    xd, wd = x.data, weight.data
    # one GEMM over all leading rows
    out = (xd.reshape(-1, xd.shape[-1]) @ wd).reshape(xd.shape[:-1] + (wd.shape[1],))
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _node(out, parents, backward)


# -- shape ops ---------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def _getitem(a: Tensor, index) -> Tensor:
    src_shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), backward)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate in the backward pass."""
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    src_shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (full,)

    return _node(np.take(a.data, idx, axis=axis), (a,), backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Per-batch row gather: ``a`` is (..., N, d), ``indices`` is (..., m) -> (..., m, d)."""
    idx = np.asarray(indices, dtype=np.intp)
    lead = a.shape[:-2]
    if idx.shape[:-1] != lead:
        raise ValueError(f"gather_rows: index batch {idx.shape[:-1]} != tensor batch {lead}")
    n, d = a.shape[-2:]
    m = idx.shape[-1]
    flat = a.data.reshape(-1, n, d)
    rows = (idx.reshape(-1, m) + (np.arange(flat.shape[0]) * n)[:, None]).ravel()
    out = flat.reshape(-1, d)[rows].reshape(lead + (m, d))
    dtype = a.dtype

    def backward(g):
        full = np.zeros((flat.shape[0] * n, d), dtype=dtype)
        np.add.at(full, rows, g.reshape(-1, d))
        return (full.reshape(a.shape),)

    return _node(out, (a,), backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _node(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, src),))


# -- reductions --------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    src = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _node(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    src = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, src).copy(),)

    return _node(a.data.mean(axis=axes, keepdims=keepdims), (a,), backward)


# -- fused neural-net kernels -----------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax; ``-inf`` entries receive exactly zero weight."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    gd = gamma.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        gxhat = g * gd
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, gg, gb

    return _node(out, (x, gamma, beta), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    x2 = xd * xd
    t = x2 * (GELU_C * GELU_A)
    t += GELU_C
    t *= xd
    np.tanh(t, out=t)
    out = t + 1.0
    out *= xd
    out *= 0.5

    def backward(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _node(out, (x,), backward)


def mse(a: Tensor, b) -> Tensor:
    """Mean of squared differences over all elements."""
    b = _lift(b, a)
    if a.shape != b.shape:
        raise ValueError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        ga = (2.0 / n) * diff * g
        return ga, -ga

    return _node(np.asarray((diff * diff).mean(), dtype=a.dtype), (a, b), backward)


def check_finite(t: Tensor | np.ndarray, what: str = "tensor") -> None:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        raise NonFiniteError(f"{what} contains {bad} non-finite value(s)")


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
