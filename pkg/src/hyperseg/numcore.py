"""Dense tensors with reverse-mode automatic differentiation.

Only the operators the segmentation models need are provided. Activations use
the ``[batch, channels, height, width]`` layout and "convolution" means
cross-correlation (no kernel flip).
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """An n-dimensional array that can take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def _as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it.

    Gradients on leaves accumulate additively across calls; callers reset them
    with :meth:`Tensor.zero_grad` between optimisation steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")

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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- elementwise -------------------------------------------------------------


def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum; ``y`` may broadcast against ``x``."""
    def bw(g):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return _record(x.data + y.data, (x, y), bw)


def mul(x: Tensor, y: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)

    return _record(x.data * y.data, (x, y), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _record(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), bw)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def bw(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _record(np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype), (x,), bw)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- structural --------------------------------------------------------------


def concat_channels(x: Tensor, y: Tensor) -> Tensor:
    """Concatenate two activations along the channel axis."""
    if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise ValueError(f"cannot concatenate {x.shape} and {y.shape} along channels")
    cx = x.shape[1]

    def bw(g):
        return g[:, :cx], g[:, cx:]

    return _record(np.concatenate([x.data, y.data], axis=1), (x, y), bw)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _record(out, (x,), bw)


# -- convolution -------------------------------------------------------------


def _pad_amounts(size: int, k: int, stride: int, padding) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return total // 2, total - total // 2
    if isinstance(padding, (int, np.integer)) and padding >= 0:
        return int(padding), int(padding)
    raise ValueError(f"unsupported padding {padding!r}")


def _scatter_windows(cols: np.ndarray, out_h: int, out_w: int, stride: int) -> np.ndarray:
    """Sum ``cols[n, c, i, j, a, b]`` into ``out[n, c, i*stride + a, j*stride + b]``."""
    n, c, h, w, kh, kw = cols.shape
    out = np.zeros((n, c, out_h, out_w), dtype=cols.dtype)
    for a in range(kh):
        for b in range(kw):
            out[:, :, a:a + (h - 1) * stride + 1:stride, b:b + (w - 1) * stride + 1:stride] += cols[..., a, b]
    return out


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding="valid") -> Tensor:
    """2-D cross-correlation of ``x [N, C, H, W]`` with ``w [O, C, kh, kw]``."""
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {ci}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    pt, pb = _pad_amounts(h, kh, stride, padding)
    pl, pr = _pad_amounts(wd, kw, stride, padding)
    hp, wp = h + pt + pb, wd + pl + pr
    oh, ow = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    if hp < kh or wp < kw or oh <= 0 or ow <= 0:
        raise ValueError(f"conv2d output would be empty for input {x.shape} and kernel {w.shape}")

    # im2col on a channels-last copy: each kernel tap is one contiguous slab
    # of the column matrix, whose columns run over (kh, kw, C).
    xp = np.zeros((n, hp, wp, c), dtype=x.data.dtype)
    xp[:, pt:pt + h, pl:pl + wd] = x.data.transpose(0, 2, 3, 1)
    hs, ws = (oh - 1) * stride + 1, (ow - 1) * stride + 1
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=x.data.dtype)
    for a in range(kh):
        for bb in range(kw):
            cols[:, :, :, a, bb] = xp[:, a:a + hs:stride, bb:bb + ws:stride]
    cols = cols.reshape(n * oh * ow, kh * kw * c)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))

    def bw(g):
        gx = gw = gb = None
        g2 = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, oh, ow, kh, kw, c)
            full = np.zeros((n, hp, wp, c), dtype=gcols.dtype)
            for a in range(kh):
                for bb in range(kw):
                    full[:, a:a + hs:stride, bb:bb + ws:stride] += gcols[:, :, :, a, bb]
            gx = full[:, pt:pt + h, pl:pl + wd].transpose(0, 3, 1, 2)
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, bw)


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-pixel linear map across channels; ``w`` is ``[out_c, in_c]``."""
    n, c, h, wd = x.shape
    o, ci = w.shape
    if ci != c:
        raise ValueError(f"conv1x1 channel mismatch: input has {c}, weight expects {ci}")
    out = np.einsum("oc,nchw->nohw", w.data, x.data)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)

    def bw(g):
        gx = np.einsum("oc,nohw->nchw", w.data, g) if x.requires_grad else None
        gw = np.einsum("nohw,nchw->oc", g, x.data) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, bw)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Transposed convolution; ``w`` is ``[in_c, out_c, kh, kw]``.

    This is the adjoint of :func:`conv2d` (valid padding) with the same weight
    tensor, so the output is ``(H - 1) * stride + kh`` tall.
    """
    n, c, h, wd = x.shape
    ci, o, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv_transpose2d channel mismatch: input has {c}, weight expects {ci}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    oh, ow = (h - 1) * stride + kh, (wd - 1) * stride + kw
    cols = np.tensordot(x.data, w.data, axes=([1], [0]))  # [N, H, W, O, kh, kw]
    out = _scatter_windows(cols.transpose(0, 3, 1, 2, 4, 5), oh, ow, stride)
    if b is not None:
        out += b.data.reshape(1, o, 1, 1)

    def bw(g):
        gx = gw = gb = None
        win = _windows(g, kh, kw, stride)  # [N, O, H, W, kh, kw]
        if x.requires_grad:
            gx = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if w.requires_grad:
            gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, bw)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Max over ``window``-sized tiles. Ties send the gradient to the first
    maximiser in row-major order."""
    n, c, h, wd = x.shape
    if h < window or wd < window:
        raise ValueError(f"maxpool window {window} larger than input {x.shape}")
    win = _windows(x.data, window, window, stride)
    oh, ow = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, oh, ow, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        for a in range(window):
            for b in range(window):
                hit = arg == a * window + b
                gx[:, :, a:a + (oh - 1) * stride + 1:stride, b:b + (ow - 1) * stride + 1:stride] += g * hit
        return (gx,)

    return _record(out, (x,), bw)


# -- loss --------------------------------------------------------------------


def softmax_ce_loss(logits: Tensor, target, ignore_index: int | None = None) -> Tensor:
    """Mean pixel-wise cross-entropy of ``logits [N, C, H, W]`` against integer
    ``target [N, H, W]`` (or ``[H, W]`` when N == 1)."""
    t = np.asarray(getattr(target, "labels", target))
    if t.ndim == 2:
        t = t[None]
    n, c, h, w = logits.shape
    if t.shape != (n, h, w):
        raise ValueError(f"target shape {t.shape} does not match logits {logits.shape}")
    valid = np.ones(t.shape, dtype=bool) if ignore_index is None else t != ignore_index
    safe_t = np.where(valid, t, 0).astype(np.int64)
    if safe_t.min(initial=0) < 0 or safe_t.max(initial=0) >= c:
        raise ValueError(f"target class index out of range for {c} classes")

    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, safe_t[:, None], axis=1)[:, 0]
    count = int(valid.sum())
    nll = (lse - picked) * valid
    loss = nll.sum() / count if count else 0.0

    def bw(g):
        if not count:
            return (np.zeros_like(logits.data),)
        p = np.exp(z - lse[:, None])
        np.put_along_axis(p, safe_t[:, None], np.take_along_axis(p, safe_t[:, None], axis=1) - 1.0, axis=1)
        p *= valid[:, None] * (float(g) / count)
        return (p.astype(logits.dtype),)

    return _record(np.asarray(loss, dtype=logits.dtype), (logits,), bw)
