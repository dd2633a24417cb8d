"""Dense tensors with reverse-mode automatic differentiation.

The op set is exactly what the mini U-Net, the CNN classifier, and the DP
training loops need: conv2d, normalization, attention primitives, reductions,
and the two losses. Data lives in numpy arrays; model code runs float32, while
gradient-check tests may build float64 graphs (every op preserves the input
dtype). Reductions use numpy's fixed sequential ordering, so repeated runs of
one configuration are bitwise reproducible.

Backward is single-shot per tape: calling it twice on the same loss raises,
which keeps per-sample gradient loops explicit.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """An op received tensors whose shapes cannot combine."""


class GradientError(RuntimeError):
    """Non-finite gradient, or misuse of the backward pass."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction (sampling / evaluation loops)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """N-d float array, optionally recording onto the autodiff tape.

    ``data`` is immutable by convention once the tensor participates in a
    tape; only ``grad`` buffers and (between tapes) parameter values are
    updated in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):  # 0-d results of numpy ops keep their dtype
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward_fn = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.data.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def narrow(self, axis, start, length):
        return narrow(self, axis, start, length)

    def backward(self):
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    """Leaf tensor factory; model code defaults to float32."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(v, dtype) -> Tensor:
    if isinstance(v, Tensor):
        return v
    return Tensor(np.asarray(v, dtype=dtype))


def _record(data: np.ndarray, parents, backward_fn) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        return out
    return Tensor(data)


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if not np.all(np.isfinite(g)):
        raise GradientError("non-finite gradient encountered during backward")
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient back down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor):
    """Populate grads of every requires_grad ancestor of a scalar loss.

    One traversal per tape; a second call on the same tape raises.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    if loss._backward_fn is None:
        raise GradientError("loss is not attached to a tape (no grad-enabled inputs)")
    if loss._consumed:
        raise GradientError("backward already ran on this tape; build a fresh forward pass")

    order = []
    seen = set()
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is None or node.grad is None:
            continue
        node._backward_fn(node.grad)
        node._consumed = True


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.data.dtype)
    data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _record(data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.data.dtype)
    data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _record(data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.data.dtype)
    data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(data, (a, b), bwd)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
    mask = x.data > 0
    data = np.where(mask, x.data, x.data * x.data.dtype.type(slope))

    def bwd(g):
        factor = np.where(mask, x.data.dtype.type(1), x.data.dtype.type(slope))
        _accum(x, g * factor)

    return _record(data, (x,), bwd)


def silu(x: Tensor) -> Tensor:
    # sigmoid as 0.5*(1+tanh(x/2)): single transcendental, no overflow
    s = 0.5 * (np.tanh(x.data * x.data.dtype.type(0.5)) + x.data.dtype.type(1))
    data = x.data * s

    def bwd(g):
        _accum(x, g * (s * (1 + x.data * (1 - s))))

    return _record(data, (x,), bwd)


# ---------------------------------------------------------------------------
# matmul / reshaping
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _record(data, (a, b), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def bwd(g):
        _accum(x, g.reshape(x.data.shape))

    return _record(data, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accum(x, np.transpose(g, inv))

    return _record(data, (x,), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    if not 0 <= start and start + length <= x.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] out of bounds for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = x.data[idx].copy()

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        _accum(x, gx)

    return _record(data, (x,), bwd)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bwd(g):
        off = 0
        for t, s in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(off, off + s)
            _accum(t, g[tuple(idx)])
            off += s

    return _record(data, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _expand_reduced(g: np.ndarray, x_shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, x_shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(x_shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, x_shape)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        _accum(x, _expand_reduced(g, x.data.shape, axis, keepdims).copy())

    return _record(np.asarray(data), (x,), bwd)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(1, np.asarray(data).size)

    def bwd(g):
        scale = x.data.dtype.type(1.0 / count)
        _accum(x, _expand_reduced(g, x.data.shape, axis, keepdims) * scale)

    return _record(np.asarray(data), (x,), bwd)


# ---------------------------------------------------------------------------
# conv / pooling / resampling
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation over NCHW input with an OIHW kernel (im2col)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, cin, h, wdt = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(
            f"conv2d channel mismatch: input has {cin} channels, kernel expects {cin_w} "
            f"(x {list(x.shape)}, w {list(w.shape)})"
        )
    if not (isinstance(stride, int) and stride >= 1):
        raise ValueError(f"conv2d stride must be an int >= 1, got {stride}")
    if not (isinstance(padding, int) and padding >= 0):
        raise ValueError(f"conv2d padding must be an int >= 0, got {padding}")
    if kh > h + 2 * padding or kw > wdt + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wdt + 2 * padding}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")

    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wdt + 2 * padding - kw) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # [n, cin, oh, ow, kh, kw] -> [n, oh*ow, cin*kh*kw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, cin * kh * kw)
    wf = w.data.reshape(cout, cin * kh * kw)
    out = cols @ wf.T
    if bias is not None:
        out = out + bias.data[None, None, :]
    data = out.transpose(0, 2, 1).reshape(n, cout, oh, ow)

    parents = (x, w) if bias is None else (x, w, bias)

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n, oh * ow, cout)
        if w.requires_grad:
            dwf = g2.reshape(-1, cout).T @ cols.reshape(-1, cin * kh * kw)
            _accum(w, dwf.reshape(w.data.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = g2 @ wf  # [n, oh*ow, cin*kh*kw]
            dwin = dcols.reshape(n, oh, ow, cin, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dwin[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            if padding:
                dx = dxp[:, :, padding : padding + h, padding : padding + wdt]
            else:
                dx = dxp
            _accum(x, dx)

    return _record(data, parents, bwd)


def avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    data = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bwd(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * x.data.dtype.type(0.25)
        _accum(x, gx)

    return _record(data, (x,), bwd)


def upsample_nearest2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        _accum(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _record(data, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization / attention pieces
# ---------------------------------------------------------------------------


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        _accum(x, (g - (g * y).sum(axis=-1, keepdims=True)) * y)

    return _record(y, (x,), bwd)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, num_groups: int, eps: float = 1e-5) -> Tensor:
    """Per-group mean/variance normalization with learned scale and shift."""
    n, c, h, w = x.shape
    if c % num_groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {num_groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm scale/shift must have shape ({c},)")
    m = (c // num_groups) * h * w
    xg = x.data.reshape(n, num_groups, m)
    mu = xg.mean(axis=-1, keepdims=True)
    d = xg - mu
    var = (d * d).mean(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat_g = d * istd
    xhat = xhat_g.reshape(n, c, h, w)
    data = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bwd(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxh = (g * gamma.data[None, :, None, None]).reshape(n, num_groups, m)
            dx = istd * (
                dxh - dxh.mean(axis=-1, keepdims=True) - xhat_g * (dxh * xhat_g).mean(axis=-1, keepdims=True)
            )
            _accum(x, dx.reshape(n, c, h, w))

    return _record(data, (x, gamma, beta), bwd)


def embedding(table: Tensor, idx) -> Tensor:
    """Row lookup into a [vocab, dim] table with scatter-add backward."""
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"embedding indices must be integers, got dtype {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding index out of range [0, {table.shape[0]})")
    data = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        _accum(table, gt)

    return _record(data, (table,), bwd)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    data = np.asarray((diff * diff).mean())

    def bwd(g):
        c = g * pred.data.dtype.type(2.0 / diff.size)
        _accum(pred, c * diff)
        _accum(target, -c * diff)

    return _record(data, (pred, target), bwd)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, K] logits, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    data = np.asarray(-logp[np.arange(n), labels].mean())
    p = np.exp(logp)

    def bwd(g):
        gm = p.copy()
        gm[np.arange(n), labels] -= 1
        _accum(logits, g * gm * logits.data.dtype.type(1.0 / n))

    return _record(data, (logits,), bwd)
