"""Small reverse-mode differentiation engine over float64 numpy arrays.

Operations are recorded on the innermost active :class:`Tape` whenever one of
their inputs requires a gradient.  Recording order is creation order, so the
node list is already topologically sorted and :meth:`Tape.backward` is a single
reverse sweep.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(x * x)
    >>> tape.backward(loss)[x]
    array([2., 4., 6.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with an optional link to the tape that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

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
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


@dataclass
class Node:
    kind: str
    out: Tensor
    parents: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; operations executed inside the block are
    recorded here.  Tapes are per-thread and must not be shared.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def record(self, kind: str, out: Tensor, parents: tuple[Tensor, ...], vjp) -> None:
        out._tape = self
        self.nodes.append(Node(kind, out, parents, vjp))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``loss`` w.r.t. every leaf that requires grad.

        Leaf gradients are also stored on ``leaf.grad``.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if parent._tape is None:
                    leaves[key] = parent
        out = {}
        for key, leaf in leaves.items():
            leaf.grad = grads[key]
            out[leaf] = grads[key]
        out[loss] = np.ones_like(loss.data)
        return out


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        if loss.requires_grad:
            # the loss is itself a leaf
            loss.grad = np.ones_like(loss.data)
            return {loss: loss.grad}
        raise ValueError("loss is not on any tape")
    return loss._tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if not np.isfinite(data).all():
        raise FloatingPointError(f"{kind} produced non-finite values")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        tape = current_tape()
        if tape is not None:
            out.requires_grad = True
            tape.record(kind, out, parents, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def _axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def vjp(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _emit("div", out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise FloatingPointError("log: non-positive input")
    return _emit("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi
    return _emit("clamp", out, (a,), lambda g: (g * inside,))


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where the constant mask ``cond`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    return _emit("where", out, (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)))


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# --- shape -----------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {tuple(shape)}") from None
    return _emit("broadcast", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concatenate: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concatenate", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


# --- reductions ------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _emit("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _emit("mean", out, (a,), vjp)


def _argext_mask(x: np.ndarray, axes: tuple[int, ...], fn) -> np.ndarray:
    """One-hot mask (first occurrence) of the extremum over ``axes``."""
    keep = [i for i in range(x.ndim) if i not in axes]
    moved = np.moveaxis(x, list(axes), list(range(x.ndim - len(axes), x.ndim)))
    flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
    idx = fn(flat, axis=-1)
    mask = np.zeros_like(flat)
    np.put_along_axis(mask, idx[..., None], 1.0, axis=-1)
    mask = mask.reshape(moved.shape)
    return np.moveaxis(mask, list(range(x.ndim - len(axes), x.ndim)), list(axes))


def amax(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    out = a.data.max(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * _argext_mask(a.data, axes, np.argmax),)

    return _emit("amax", out, (a,), vjp)


def minmax_scale(a, axis=None, eps: float = 1e-8) -> Tensor:
    """``(a - min) / (max - min + eps)`` over ``axis``; constant slices map to 0."""
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    lo = a.data.min(axis=axes, keepdims=True)
    hi = a.data.max(axis=axes, keepdims=True)
    r = hi - lo + eps
    shifted = a.data - lo
    out = shifted / r

    def vjp(g):
        g_lo = (g * (-1.0 / r + shifted / r**2)).sum(axis=axes, keepdims=True)
        g_hi = -(g * shifted / r**2).sum(axis=axes, keepdims=True)
        return (g / r
                + g_lo * _argext_mask(a.data, axes, np.argmin)
                + g_hi * _argext_mask(a.data, axes, np.argmax),)

    return _emit("minmax_scale", out, (a,), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    return _emit("logsumexp", out, (a,), lambda g: (np.expand_dims(g, axis) * e / s,))


def l2_normalize(a, axis: int = -1) -> Tensor:
    """Unit-normalize along ``axis``; all-zero vectors stay zero."""
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    zero = n == 0
    safe = np.where(zero, 1.0, n)
    out = np.where(zero, 0.0, a.data / safe)

    def vjp(g):
        gx = (g - out * (g * out).sum(axis=axis, keepdims=True)) / safe
        return (np.where(zero, 0.0, gx),)

    return _emit("l2_normalize", out, (a,), vjp)


# --- linear algebra / spatial ---------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", out, (a, b), vjp)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation on NHWC input with an (kh, kw, cin, cout) kernel."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {xp.shape}")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match kernel {w.shape}")
        out = out + b.data
        parents = (x, w, b)

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, pad:pad + h, pad:pad + wd, :] if pad else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _emit("conv2d", out, parents, vjp)


def avg_pool2d(x, k: int = 2) -> Tensor:
    x = as_tensor(x)
    n, h, w, c = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: spatial dims {(h, w)} not divisible by {k}")
    out = x.data.reshape(n, h // k, k, w // k, k, c).mean(axis=(2, 4))

    def vjp(g):
        g = np.repeat(np.repeat(g, k, axis=1), k, axis=2)
        return (g / (k * k),)

    return _emit("avg_pool2d", out, (x,), vjp)


def _resize_plan(n_in: int, n_out: int):
    # half-pixel centres, clamped at the lower border
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def _lerp(x: np.ndarray, axis: int, plan) -> np.ndarray:
    i0, i1, f = plan
    shape = [1] * x.ndim
    shape[axis] = f.size
    lo = np.take(x, i0, axis=axis)
    hi = np.take(x, i1, axis=axis)
    # lerp form keeps constant inputs exactly constant
    return lo + f.reshape(shape) * (hi - lo)


def _lerp_adjoint(g: np.ndarray, axis: int, plan, n_in: int) -> np.ndarray:
    i0, i1, f = plan
    shape = [1] * g.ndim
    shape[axis] = f.size
    f = f.reshape(shape)
    out_shape = list(g.shape)
    out_shape[axis] = n_in
    gx = np.zeros(out_shape)
    moved = np.moveaxis(gx, axis, 0)
    np.add.at(moved, i0, np.moveaxis(g * (1.0 - f), axis, 0))
    np.add.at(moved, i1, np.moveaxis(g * f, axis, 0))
    return gx


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of an NHWC tensor (align-corners-false convention)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize: expected NHWC input, got shape {x.shape}")
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"bilinear_resize: invalid target size {(out_h, out_w)}")
    _, h, w, _ = x.shape
    py, px = _resize_plan(h, out_h), _resize_plan(w, out_w)
    out = _lerp(_lerp(x.data, 1, py), 2, px)

    def vjp(g):
        return (_lerp_adjoint(_lerp_adjoint(g, 2, px, w), 1, py, h),)

    return _emit("bilinear_resize", out, (x,), vjp)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "relu": relu,
    "sigmoid": sigmoid,
    "clamp": clamp,
    "where": where,
    "reshape": reshape,
    "transpose": transpose,
    "broadcast": broadcast_to,
    "concatenate": concatenate,
    "sum": sum_,
    "mean": mean,
    "amax": amax,
    "minmax_scale": minmax_scale,
    "softmax": softmax,
    "logsumexp": logsumexp,
    "l2_normalize": l2_normalize,
    "matmul": matmul,
    "conv2d": conv2d,
    "avg_pool2d": avg_pool2d,
    "bilinear_resize": bilinear_resize,
}


def forward_primitive(kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    if kind == "concatenate":
        return fn(inputs, **(attrs or {}))
    return fn(*inputs, **(attrs or {}))


def grad_check(f: Callable[..., Tensor], x, step: float = 1e-5, coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between the tape gradient and central differences.

    ``x`` is a Tensor or a list of Tensors passed positionally to ``f``.  With
    ``coords`` set, only that many randomly chosen coordinates per input are
    probed by finite differences.  Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    xs = [x] if isinstance(x, Tensor) else list(x)
    leaves = [Tensor(t.data.copy(), requires_grad=True) for t in xs]
    with Tape() as tape:
        y = f(*leaves)
    if y.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {y.shape}")
    if not np.isfinite(y.data).all():
        raise FloatingPointError("non-finite function value")
    grads = tape.backward(y) if y.requires_grad else {}
    rng = rng if rng is not None else np.random.default_rng(0)

    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = grads.get(leaf, np.zeros_like(leaf.data))
        size = leaf.data.size
        idx = np.arange(size) if coords is None or coords >= size else rng.choice(size, coords, replace=False)
        base = [t.data for t in leaves]
        for flat in idx:
            probe = base[k].copy().reshape(-1)
            orig = probe[flat]
            probe[flat] = orig + step
            args = [Tensor(b) for b in base]
            args[k] = Tensor(probe.reshape(leaf.shape))
            fp = f(*args).item()
            probe[flat] = orig - step
            args[k] = Tensor(probe.reshape(leaf.shape))
            fm = f(*args).item()
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("non-finite value during finite differences")
            numeric = (fp - fm) / (2.0 * step)
            a = analytic.reshape(-1)[flat]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
