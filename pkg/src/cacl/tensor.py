"""Dense tensors with reverse-mode differentiation on top of numpy.

Each op returns a new :class:`Tensor` holding its parents and a closure
mapping the output gradient to one gradient per parent. Graph recording
is skipped when no parent requires a gradient or inside :func:`no_grad`.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_state = {"grad": True, "dtype": np.float64, "check_finite": True}


class ShapeError(ValueError):
    pass


class NumericFault(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    previous = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = previous


def grad_enabled() -> bool:
    return _state["grad"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype.type


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def dtype_scope(dtype):
    previous = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _state["dtype"])
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        backward(self, grad)

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(op: str, arr: np.ndarray) -> None:
    if _state["check_finite"] and not np.isfinite(arr).all():
        raise NumericFault(f"{op}: non-finite values in output of shape {arr.shape}")


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    _finite(op, data)
    out = Tensor(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.name = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    grads = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericFault("log: non-positive input")
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def power(a: Tensor, p: float) -> Tensor:
    return _make("power", a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


# reductions and shape ---------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axes, keepdims), 1.0 / count)


def amax(a: Tensor, axis=None, keepdims=False) -> Tensor:
    """Max reduction; ties share the gradient equally."""
    axes = _norm_axes(axis, a.ndim)
    kept = a.data.max(axis=axes, keepdims=True)
    out = kept if keepdims else np.squeeze(kept, axis=axes)

    def bw(g):
        mask = a.data == kept
        mask = mask / mask.sum(axis=axes, keepdims=True)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (mask * g,)

    return _make("max", out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        if _needs_add_at(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make("slice", np.array(out, copy=True), (a,), bw)


def _needs_add_at(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {ref.shape} and {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make("concat", out, tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


# linear algebra ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight of shape (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape)
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make("linear", out.reshape(*lead, weight.shape[0]), parents, bw)


# normalizations ---------------------------------------------------------------

def softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax", out, (a,), bw)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(np.log(s) + m, axis=axis)

    def bw(g):
        return (np.expand_dims(g, axis) * e / s,)

    return _make("logsumexp", out, (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    m = a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(a.data - m).sum(axis=-1, keepdims=True)) + m
    out = a.data - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (a,), bw)


def l2_normalize(a: Tensor, eps: float = 0.0) -> Tensor:
    norm = np.sqrt((a.data ** 2).sum(axis=-1, keepdims=True))
    if np.any(norm <= eps):
        raise NumericFault("l2_normalize: zero-norm vector")
    out = a.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _make("l2_normalize", out, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: input {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make("layer_norm", out, (x, gamma, beta), bw)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-sample normalisation over channel groups and all trailing axes of
    a (B, C, ...) input, then a per-channel affine."""
    b, c = x.shape[:2]
    if c % groups or gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: input {x.shape}, {groups} groups, gamma {gamma.shape}, beta {beta.shape}")
    grouped = x.data.reshape(b, groups, -1)
    mu = grouped.mean(axis=-1, keepdims=True)
    xc = grouped - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = (xc * inv).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    axes = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gh = (g * gamma.data.reshape(bshape)).reshape(b, groups, -1)
        xh = xhat.reshape(b, groups, -1)
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xh * (gh * xh).mean(axis=-1, keepdims=True))
        return gx.reshape(x.shape), gg, gb

    return _make("group_norm", out, (x, gamma, beta), bw)


def cross_entropy_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"cross_entropy_with_logits: logits {logits.shape} vs labels {labels.shape}")
    m = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise ValueError(f"cross_entropy_with_logits: labels must lie in 0..{m - 1}")
    logp = log_softmax(logits)
    picked = getitem(logp, (np.arange(labels.size), labels))
    return mul(tsum(picked), -1.0 / labels.size)


# convolution and pooling ------------------------------------------------------

def conv(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """N-d cross-correlation, stride 1, via an im2col matmul.

    ``x`` is (B, C, *spatial), ``weight`` is (O, C, *kernel).
    """
    nd = weight.ndim - 2
    if x.ndim != nd + 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv{nd}d: input {x.shape} does not match weight {weight.shape}")
    kernel = weight.shape[2:]
    pad = [(0, 0), (0, 0)] + [(padding, padding)] * nd
    xp = np.pad(x.data, pad) if padding else x.data
    spatial_axes = tuple(range(2, 2 + nd))
    if any(xp.shape[2 + d] < kernel[d] for d in range(nd)):
        raise ShapeError(f"conv{nd}d: kernel {kernel} larger than padded input {xp.shape[2:]}")
    windows = sliding_window_view(xp, kernel, axis=spatial_axes)
    batch = x.shape[0]
    out_spatial = windows.shape[2:2 + nd]
    order = (0,) + tuple(range(2, 2 + nd)) + (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    cols = windows.transpose(order).reshape(-1, int(np.prod(weight.shape[1:])))
    wmat = weight.data.reshape(weight.shape[0], -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.moveaxis(out.reshape(batch, *out_spatial, weight.shape[0]), -1, 1)

    def bw(g):
        g2 = np.moveaxis(g, 1, -1).reshape(-1, weight.shape[0])
        gw = (g2.T @ cols).reshape(weight.shape)
        gxp = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(batch, *out_spatial, *weight.shape[1:])
            # kernel offsets first so each offset is one contiguous (B, C, *out) block
            lead = tuple(range(2 + nd, 2 + 2 * nd))
            gcols = np.ascontiguousarray(gcols.transpose(lead + (0, 1 + nd) + tuple(range(1, 1 + nd))))
            gxp = np.zeros_like(xp)
            for offset in itertools.product(*(range(k) for k in kernel)):
                target = (slice(None), slice(None)) + tuple(
                    slice(o, o + s) for o, s in zip(offset, out_spatial)
                )
                gxp[target] += gcols[offset]
            if padding:
                gxp = gxp[(slice(None), slice(None)) + (slice(padding, -padding),) * nd]
        grads = [gxp, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(f"conv{nd}d", out, parents, bw)


def conv2d(x, weight, bias=None, padding=0):
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-d, got {weight.shape}")
    return conv(x, weight, bias, padding)


def conv3d(x, weight, bias=None, padding=0):
    if weight.ndim != 5:
        raise ShapeError(f"conv3d: weight must be 5-d, got {weight.shape}")
    return conv(x, weight, bias, padding)


def max_pool(x: Tensor, kernel: Sequence[int]) -> Tensor:
    """Non-overlapping max pooling over the trailing ``len(kernel)`` axes.

    Each pooled axis must be divisible by its kernel size.
    """
    kernel = tuple(kernel)
    nd = len(kernel)
    lead = x.shape[:-nd]
    spatial = x.shape[-nd:]
    if any(s % k for s, k in zip(spatial, kernel)):
        raise ShapeError(f"max_pool: spatial dims {spatial} not divisible by kernel {kernel}")
    split = lead + tuple(itertools.chain.from_iterable((s // k, k) for s, k in zip(spatial, kernel)))
    window_axes = tuple(len(lead) + 2 * d + 1 for d in range(nd))
    xr = x.data.reshape(split)
    kept = xr.max(axis=window_axes, keepdims=True)
    out = np.squeeze(kept, axis=window_axes)

    def bw(g):
        mask = xr == kept
        mask = mask / mask.sum(axis=window_axes, keepdims=True)
        return ((mask * np.expand_dims(g, window_axes)).reshape(x.shape),)

    return _make("max_pool", out, (x,), bw)


def where_mask(x: Tensor, keep: np.ndarray, fill: float) -> Tensor:
    """Replace entries where ``keep`` is False by a constant ``fill``."""
    keep = np.broadcast_to(keep, x.shape)
    out = np.where(keep, x.data, fill)
    return _make("where_mask", out, (x,), lambda g: (g * keep,))
