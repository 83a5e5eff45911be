"""Dense tensors with reverse-mode gradients.

Every op returns a new :class:`Tensor`. When gradient recording is enabled and
an input requires a gradient, the result keeps a reference to its parents and
a closure mapping the output gradient to parent gradients. :func:`grad` sorts
that graph topologically (the tape) and replays it backwards.

Broadcasting follows numpy's trailing-dimension rule. Any op that produces a
NaN or Inf raises :class:`NonFiniteError` immediately.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "TapeError",
    "tensor",
    "zeros",
    "grad",
    "no_grad",
    "precision",
    "default_dtype",
    "finite_diff_check",
]


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, detail: str = ""):
        self.op = op
        super().__init__(f"non-finite value produced by {op}" + (f": {detail}" if detail else ""))


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (f32 by default)."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = _contiguous(arr)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    # -- introspection ----------------------------------------------------
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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators --------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, p):
        return pow(self, p)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

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
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad, name)


def _contiguous(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray promotes 0-d arrays to shape (1,)
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=default_dtype()))


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(op, f"{bad} of {arr.size} elements")


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data = _contiguous(np.asarray(data))
    out.name = None
    out._op = op
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a} and {b} are not broadcast-compatible "
                         "(trailing dimensions must match or be 1)") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def back(g):
        ga = g / b.data
        gb = -g * out / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("div", out, (a, b), back)


def pow(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data ** np.asarray(p, dtype=a.dtype)

    def back(g):
        return (g * p * a.data ** np.asarray(p - 1.0, dtype=a.dtype),)

    return _make("pow", out, (a,), back)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def back(g):
        with np.errstate(divide="ignore"):
            return (g * 0.5 / out,)

    return _make("sqrt", out, (a,), back)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    keep = a.data > 0
    return _make("relu", np.where(keep, a.data, 0).astype(a.dtype), (a,), lambda g: (g * keep,))


def silu(a) -> Tensor:
    """x * sigmoid(x); smooth, so central differences see no kinks."""
    a = _as_tensor(a)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = a.data * sig

    def back(g):
        return (g * (sig + a.data * sig * (1.0 - sig)),)

    return _make("silu", out, (a,), back)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1 - out * out),))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axes, keepdims), 1.0 / count)


def cast(a, dtype) -> Tensor:
    """Change dtype; the gradient is cast back to the input's dtype."""
    a = _as_tensor(a)
    src = a.data.dtype
    return _make("cast", a.data.astype(dtype), (a,), lambda g: (g.astype(src),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make("concat", np.concatenate([t.data for t in ts], axis=ax), ts, back)


def split(a, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    a = _as_tensor(a)
    ax = axis % a.ndim
    if int(np.sum(sizes)) != a.shape[ax]:
        raise ShapeError(f"split: sizes {list(sizes)} do not add up to extent {a.shape[ax]}")
    outs = []
    start = 0
    for n in sizes:
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(start, start + n)
        outs.append(take_slice(a, tuple(idx)))
        start += n
    return outs


def take_slice(a, index) -> Tensor:
    """Basic (slice-only) or integer-array indexing with scatter-add backward."""
    a = _as_tensor(a)
    out = a.data[index]

    basic = all(isinstance(i, slice) for i in index) if isinstance(index, tuple) else isinstance(index, slice)

    def back(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make("index", np.array(out, copy=True), (a,), back)


def take(a, indices, axis: int = 0) -> Tensor:
    a = _as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis % a.ndim] = np.asarray(indices, dtype=np.int64)
    return take_slice(a, tuple(idx))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules on the leading dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), back)


# ---------------------------------------------------------------------------
# normalisation and friends


def l2_normalize(a, eps: float = 1e-8) -> Tensor:
    """Unit-normalise along the last axis. Rows with norm < eps map to zero."""
    a = _as_tensor(a)
    norm = np.sqrt((a.data.astype(np.float64) ** 2).sum(-1, keepdims=True)).astype(a.dtype)
    live = norm >= eps
    safe = np.where(live, norm, 1).astype(a.dtype)
    out = np.where(live, a.data / safe, 0).astype(a.dtype)

    def back(g):
        proj = (g * out).sum(-1, keepdims=True)
        return (np.where(live, (g - out * proj) / safe, 0).astype(a.dtype),)

    return _make("l2_normalize", out, (a,), back)


def layer_norm(a, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    a = _as_tensor(a)
    mu = a.data.mean(-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=a.dtype))
    xhat = (xc * inv).astype(a.dtype)

    def back(g):
        gm = g.mean(-1, keepdims=True)
        gx = g * xhat
        return (inv * (g - gm - xhat * gx.mean(-1, keepdims=True)),)

    y = _make("layer_norm", xhat, (a,), back)
    if weight is not None:
        y = mul(y, weight)
    if bias is not None:
        y = add(y, bias)
    return y


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), back)


def conv3d(x, w, b=None) -> Tensor:
    """3x3x3 convolution with zero padding 1. x: [B, Ci, T, H, W], w: [Co, Ci, 3, 3, 3]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 5 or w.ndim != 5 or w.shape[2:] != (3, 3, 3) or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv3d: input {x.shape} incompatible with kernel {w.shape}")
    out = _kernels.conv3d(x.data, w.data).astype(x.dtype, copy=False)

    def back(g):
        g = np.ascontiguousarray(g)
        gx = _kernels.conv3d_grad_input(g, w.data).astype(x.dtype, copy=False)
        gw = _kernels.conv3d_grad_weight(x.data, g).astype(w.dtype, copy=False)
        return gx, gw

    y = _make("conv3d", out, (x, w), back)
    if b is not None:
        y = add(y, reshape(b, (1, -1, 1, 1, 1)))
    return y


# ---------------------------------------------------------------------------
# gradients


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def grad(out: Tensor, inputs: Sequence[Tensor], allow_unused: bool = False) -> list:
    """Gradients of the scalar ``out`` with respect to each of ``inputs``.

    Inputs that ``out`` does not depend on raise :class:`TapeError`, or map to
    ``None`` when ``allow_unused`` is set.
    """
    if out.size != 1:
        raise TapeError(f"grad needs a scalar output, got shape {out.shape}")
    order = _toposort(out) if out.requires_grad else [out]
    on_tape = {id(n) for n in order}
    wanted = {id(x) for x in inputs}
    for x in inputs:
        if id(x) not in on_tape and not allow_unused:
            label = x.name or repr(x)
            raise TapeError(f"input {label} is not on the tape of this output")

    grads: dict[int, np.ndarray] = {id(out): np.ones(out.shape, dtype=out.dtype)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if id(node) not in wanted:
            del grads[id(node)]

    result = []
    for x in inputs:
        g = grads.get(id(x))
        if g is None:
            result.append(None if allow_unused else Tensor(np.zeros(x.shape, x.dtype)))
        else:
            _check_finite("grad", g)
            result.append(Tensor(np.asarray(g, dtype=x.dtype).reshape(x.shape)))
    return result


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-3,
    coords: Iterable[int] | None = None,
    dtype=np.float64,
    mode: str = "normwise",
) -> float:
    """Relative error between the tape gradient and central differences.

    ``f`` maps a tensor shaped like ``x`` to a scalar tensor. Both the analytic
    and the numeric gradient are evaluated at ``dtype`` (float64 by default; f32
    round-off swamps small components at h=1e-3). ``coords`` restricts the check
    to a subset of flat indices.

    ``mode="normwise"`` returns max|a - n| / max|n| over the checked
    coordinates. ``mode="componentwise"`` returns max(|a_i - n_i| / |n_i|),
    which blows up on components near zero: there the O(h^2) truncation
    term is larger than the component itself even when the tape is exact.
    """
    if mode not in ("normwise", "componentwise"):
        raise ValueError(f"unknown mode {mode!r}")
    base = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with precision(dtype):
        xt = Tensor(base, requires_grad=True)
        out = f(xt)
        if not np.isfinite(out.data).all():
            raise NonFiniteError("finite_diff_check", "f(x) is not finite")
        (g,) = grad(out, [xt], allow_unused=True)
        analytic = np.zeros(base.size) if g is None else g.data.astype(np.float64).reshape(-1)

        idx = range(base.size) if coords is None else coords
        worst = 0.0
        diffs, scales = [], []
        flat = xt.data.reshape(-1)
        for i in idx:
            vals, ends = [], []
            for sign in (1.0, -1.0):
                pert = flat.copy()
                pert[i] = pert[i] + pert.dtype.type(sign * h)
                ends.append(float(pert[i]))
                with no_grad():
                    v = f(Tensor(pert.reshape(base.shape))).data
                if not np.isfinite(v).all():
                    raise NonFiniteError("finite_diff_check", f"f(x ± h·e_{i}) is not finite")
                vals.append(float(np.asarray(v, dtype=np.float64).reshape(-1)[0]))
            # divide by the step actually taken; in f32, x ± h is rounded
            numeric = (vals[0] - vals[1]) / (ends[0] - ends[1])
            diffs.append(abs(analytic[i] - numeric))
            scales.append(abs(numeric))
            worst = max(worst, diffs[-1] / (scales[-1] + 1e-8))
    if mode == "componentwise" or not diffs:
        return worst
    return max(diffs) / (max(scales) + 1e-8)
