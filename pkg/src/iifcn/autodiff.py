"""Dense NCHW tensors with reverse-mode automatic differentiation.

Every operation records a closure that maps the gradient of its output to
gradients of its inputs. ``Tensor.backward`` walks the recorded graph in
reverse topological order and accumulates into ``Parameter.grad``.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError, ShapeError

__all__ = [
    "Tensor",
    "Parameter",
    "AdamState",
    "adam_step",
    "he_normal",
    "conv2d",
    "conv2d_transpose",
    "maxpool2",
    "concat_channels",
    "channel_slice",
    "center_crop",
    "relu",
    "add",
    "softmax2",
    "log",
    "log10",
    "abs_",
    "no_grad_const",
    "no_grad",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


_BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A numpy array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        if self.data.ndim > 4:
            raise ShapeError(f"tensors have at most 4 axes, got shape {self.data.shape}")
        if any(n < 1 for n in self.data.shape):
            raise ShapeError(f"all extents must be >= 1, got shape {self.data.shape}")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: _BackwardFn | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        """Populate gradients of every leaf reachable from this scalar."""
        if self.data.size != 1:
            raise InvalidArgumentError(
                f"backward() needs a scalar loss, got shape {self.shape}"
            )
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
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

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return _unary(self, -self.data, lambda g: -g)

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def sum(self, axis=None) -> "Tensor":
        """Sum over ``axis`` (an int or tuple; None means every axis)."""
        shape = self.shape
        if axis is None:
            return _unary(self, np.asarray(self.data.sum()), lambda g: np.broadcast_to(g, shape).copy())
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)

        def back(g):
            return np.broadcast_to(np.expand_dims(g, axes), shape).copy()

        return _unary(self, self.data.sum(axis=axes), back)

    def mean(self, axis=None) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        old = self.shape
        return _unary(self, self.data.reshape(*shape), lambda g: g.reshape(old))


class Parameter(Tensor):
    """A trainable leaf tensor with a stable string id and a gradient buffer."""

    __slots__ = ("id",)

    def __init__(self, data, id: str):
        super().__init__(np.array(data, copy=True), requires_grad=True)
        self.id = id
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.id!r}, shape={self.shape})"


def _topological_order(root: Tensor) -> list[Tensor]:
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


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents: Sequence[Tensor], backward: _BackwardFn) -> Tensor:
    need = _grad_enabled and any(p.requires_grad for p in parents)
    if not need:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unary(x: Tensor, data, backward: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    return _make(data, (x,), lambda g: (backward(g),))


def no_grad_const(x) -> Tensor:
    """Wrap an array as a constant (no gradient flows into it)."""
    return Tensor(np.asarray(x))


# elementwise ------------------------------------------------------------

def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    """Elementwise sum. Tensors must match in shape; plain scalars broadcast."""
    a_is, b_is = isinstance(a, Tensor), isinstance(b, Tensor)
    if a_is and b_is and a.shape != b.shape and a.data.size > 1 and b.data.size > 1:
        raise ShapeError(f"add needs identical shapes, got {a.shape} and {b.shape}")
    a = _as_tensor(a, b.dtype if b_is else None)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_reduce_to(g / bd, ad.shape), _reduce_to(-g * out / bd, bd.shape)),
    )


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(x, floor)``; the clamp passes zero gradient."""
    xd = x.data
    clipped = np.maximum(xd, floor) if floor > 0 else xd
    mask = xd >= floor if floor > 0 else None

    def back(g):
        gx = g / clipped
        return gx * mask if mask is not None else gx

    return _unary(x, np.log(clipped), back)


def log10(x: Tensor) -> Tensor:
    return log(x) * (1.0 / np.log(10.0))


def abs_(x: Tensor) -> Tensor:
    # sign(0) = 0 gives subgradient 0 at the kink
    s = np.sign(x.data)
    return _unary(x, np.abs(x.data), lambda g: g * s)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _unary(x, np.where(mask, x.data, 0), lambda g: g * mask)


def softmax2(logits: Tensor) -> Tensor:
    """Softmax across the channel axis of an N×2×H×W tensor."""
    if logits.data.ndim != 4 or logits.shape[1] != 2:
        raise ShapeError(f"softmax2 needs N×2×H×W logits, got {logits.shape}")
    z = logits.data
    # two-class softmax as a logistic of the logit difference keeps both
    # outputs strictly inside (0, 1) and summing to one
    d = z[:, 1:2] - z[:, 0:1]
    p1 = 0.5 * (1.0 + np.tanh(0.5 * d))
    p = np.concatenate([1.0 - p1, p1], axis=1)

    def back(g):
        s = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - s),)

    return _make(p, (logits,), back)


# structural ---------------------------------------------------------------

def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    if not inputs:
        raise InvalidArgumentError("concat_channels needs at least one tensor")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.data.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(
                f"concat_channels needs matching N,H,W; got {ref} and {t.shape}"
            )
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])
    data = np.concatenate([t.data for t in inputs], axis=1)

    def back(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(data, tuple(inputs), back)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[:, start:stop] = g
        return (out,)

    return _make(x.data[:, start:stop], (x,), back)


def center_crop(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Crop the trailing two axes, removing floor(d/2) at top/left."""
    H, W = x.shape[-2:]
    if target_h > H or target_w > W or target_h < 1 or target_w < 1:
        raise InvalidArgumentError(
            f"cannot crop {H}×{W} to {target_h}×{target_w}"
        )
    top, left = (H - target_h) // 2, (W - target_w) // 2
    sl = (..., slice(top, top + target_h), slice(left, left + target_w))
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[sl] = g
        return (out,)

    return _make(x.data[sl], (x,), back)


def maxpool2(x: Tensor) -> Tensor:
    """2×2 max pooling with stride 2; ties route to the first row-major index."""
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 needs even H and W, got H={H}, W={W}")
    win = x.data.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(N, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def back(g):
        onehot = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(N, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(N, C, H, W),)

    return _make(out, (x,), back)


# convolutions -------------------------------------------------------------

def _correlate(x: np.ndarray, w: np.ndarray, rate: int = 1) -> np.ndarray:
    """Valid cross-correlation of N×C×H×W with O×C×kh×kw, taps ``rate`` apart."""
    O, C, kh, kw = w.shape
    if kh == 1 and kw == 1:
        return np.tensordot(w[:, :, 0, 0], x, axes=([1], [1])).transpose(1, 0, 2, 3)
    eh, ew = rate * (kh - 1) + 1, rate * (kw - 1) + 1
    win = sliding_window_view(x, (eh, ew), axis=(2, 3))
    if rate > 1:
        win = win[..., ::rate, ::rate]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _kernel_grad(x: np.ndarray, g: np.ndarray, kh: int, kw: int, rate: int = 1) -> np.ndarray:
    if kh == 1 and kw == 1:
        return np.tensordot(g, x, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
    eh, ew = rate * (kh - 1) + 1, rate * (kw - 1) + 1
    win = sliding_window_view(x, (eh, ew), axis=(2, 3))
    if rate > 1:
        win = win[..., ::rate, ::rate]
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


def _pad_amounts(padding: str, kh: int, kw: int, rate: int):
    if padding == "valid":
        return (0, 0), (0, 0)
    if padding in ("preserve", "dilated"):
        th, tw = rate * (kh - 1), rate * (kw - 1)
        if kh % 2 == 0 and kw % 2 == 0:
            return (0, th), (0, tw)
        if kh % 2 and kw % 2:
            return (th // 2, th // 2), (tw // 2, tw // 2)
        raise ShapeError(f"preserve padding needs both kernel extents even or both odd, got {kh}×{kw}")
    raise InvalidArgumentError(f"unknown padding mode {padding!r}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           padding: str = "valid", rate: int = 1) -> Tensor:
    """Stride-1 2-D cross-correlation.

    ``padding`` is ``"valid"`` (no padding), ``"preserve"`` (output keeps
    H×W; even kernels pad bottom/right only) or ``"dilated"`` (taps spaced
    ``rate`` apart with ``rate*(k-1)/2`` zeros per side).
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and kernel, got {x.shape} and {kernel.shape}")
    N, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ShapeError(f"kernel expects {Ck} input channels but input has {C}")
    if rate < 1:
        raise InvalidArgumentError(f"dilation rate must be >= 1, got {rate}")
    if padding == "valid" and rate != 1:
        raise InvalidArgumentError("valid padding is undilated; use padding='dilated'")
    (pt, pb), (pl, pr) = _pad_amounts(padding, kh, kw, rate)
    if padding == "valid" and (kh > H or kw > W):
        raise ShapeError(f"valid conv needs kernel {kh}×{kw} to fit input {H}×{W}")
    xd = x.data
    if pt or pb or pl or pr:
        xd = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    out = _correlate(xd, kernel.data, rate)
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1)
    w = kernel.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def back(g):
        gx = None
        if x.requires_grad:
            eh, ew = rate * (kh - 1), rate * (kw - 1)
            gp = np.pad(g, ((0, 0), (0, 0), (eh, eh), (ew, ew)))
            wf = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx = _correlate(gp, np.ascontiguousarray(wf), rate)
            gx = gx[:, :, pt:pt + H, pl:pl + W]
        gw = _kernel_grad(xd, g, kh, kw, rate) if kernel.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, parents, back)


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                     stride: int = 1) -> Tensor:
    """Adjoint of a stride-``stride`` valid convolution.

    ``kernel`` is Cin×Cout×kh×kw; output spatial size is
    ``stride*(H-1) + kh`` by ``stride*(W-1) + kw``.
    """
    if stride < 1:
        raise InvalidArgumentError(f"stride must be >= 1, got {stride}")
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d_transpose needs 4-D tensors, got {x.shape} and {kernel.shape}")
    N, C, H, W = x.shape
    Ck, O, kh, kw = kernel.shape
    if Ck != C:
        raise ShapeError(f"kernel expects {Ck} input channels but input has {C}")
    Ho, Wo = stride * (H - 1) + kh, stride * (W - 1) + kw
    w = kernel.data
    xd = x.data
    if stride == 1:
        xp = np.pad(xd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        out = _correlate(xp, wf)
    elif stride == kh and stride == kw:
        y = np.tensordot(xd, w, axes=([1], [0]))  # N H W O kh kw
        out = np.ascontiguousarray(y.transpose(0, 3, 1, 4, 2, 5).reshape(N, O, Ho, Wo))
    else:
        y = np.tensordot(xd, w, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        out = np.zeros((N, O, Ho, Wo), dtype=y.dtype)
        for a, b in itertools.product(range(kh), range(kw)):
            out[:, :, a:a + stride * (H - 1) + 1:stride, b:b + stride * (W - 1) + 1:stride] += y[..., a, b]
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def back(g):
        win = sliding_window_view(g, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        gx = None
        if x.requires_grad:
            gx = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(xd, win, axes=([0, 2, 3], [0, 2, 3])) if kernel.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, parents, back)


# initialization and optimization -------------------------------------------

def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
              dtype=np.float64) -> np.ndarray:
    """Zero-mean normal draws with standard deviation sqrt(2 / fan_in)."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.9999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Iterable[Parameter], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        g = p.grad
        m = state.m.get(p.id)
        if m is None:
            m = state.m[p.id] = np.zeros_like(p.data)
            state.v[p.id] = np.zeros_like(p.data)
        v = state.v[p.id]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
