"""Dense tensors with tape-based reverse-mode differentiation.

Every op returns a fresh :class:`Tensor` that remembers its parents and a
closure that maps the output gradient to parent gradients. ``backward``
walks the recorded graph once in reverse topological order.

Image-like tensors use NCHW layout. Kernels use ``(out, in, kh, kw)``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
BN_EPS = 1e-5


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for new tensors (float64 or float32)."""
    global DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    DEFAULT_DTYPE = dtype.type


class Tensor:
    """An n-dimensional array that can take part in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: Sequence["Tensor"] = (),
                 _backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = tuple(_parents)
        self._backward = _backward

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
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=fn)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` ancestor of a scalar loss.

    Gradients accumulate into existing ``.grad`` buffers, so callers clear
    them between steps (the optimizer does this after each update).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), fn)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def log(a: Tensor, eps: float = 0.0) -> Tensor:
    """Natural log; with ``eps > 0`` the input is clamped to ``[eps, inf)`` first."""
    x = np.maximum(a.data, eps) if eps > 0 else a.data
    passed = a.data >= eps if eps > 0 else True
    return _make(np.log(x), (a,), lambda g: (g / x * passed,))


def take(a: Tensor, index: tuple) -> Tensor:
    """Gather ``a.data[index]`` with advanced indexing; duplicates accumulate."""
    out = a.data[index]

    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), fn)


def softmax_map(logits: Tensor, axis: int = 1) -> Tensor:
    """Softmax over the channel axis, stabilized by max subtraction."""
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (logits,), fn)


# ---------------------------------------------------------------------------
# convolution family
# ---------------------------------------------------------------------------

def _conv_out(n: int, k: int, stride: int, dilation: int) -> int:
    return (n - dilation * (k - 1) - 1) // stride + 1


def same_padding(h: int, w: int, kh: int, kw: int, stride: int, dilation: int):
    """(top, bottom, left, right) padding giving ``ceil(n / stride)`` outputs."""
    pads = []
    for n, k in ((h, kh), (w, kw)):
        out = -(-n // stride)
        total = max((out - 1) * stride + dilation * (k - 1) + 1 - n, 0)
        pads.append((total // 2, total - total // 2))
    return pads[0] + pads[1]


def _check_conv(x: np.ndarray, k: np.ndarray, what: str) -> None:
    if x.ndim != 4 or k.ndim != 4:
        raise ValueError(f"{what}: expected 4-d input and kernel, got input {x.shape} and kernel {k.shape}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for a in range(kh):
        r0 = a * dilation
        for b in range(kw):
            c0 = b * dilation
            cols[:, :, a, b] = xp[:, :, r0:r0 + stride * (ho - 1) + 1:stride,
                                  c0:c0 + stride * (wo - 1) + 1:stride]
    return cols


def _col2im(cols: np.ndarray, padded_shape: tuple, stride: int, dilation: int) -> np.ndarray:
    n, c, kh, kw, ho, wo = cols.shape
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    for a in range(kh):
        r0 = a * dilation
        for b in range(kw):
            c0 = b * dilation
            xp[:, :, r0:r0 + stride * (ho - 1) + 1:stride,
               c0:c0 + stride * (wo - 1) + 1:stride] += cols[:, :, a, b]
    return xp


def _corr(xp: np.ndarray, k: np.ndarray, stride: int, dilation: int):
    """Raw cross-correlation of a padded input. Returns output and the column buffer."""
    n, c, hp, wp = xp.shape
    o, _, kh, kw = k.shape
    ho = _conv_out(hp, kh, stride, dilation)
    wo = _conv_out(wp, kw, stride, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {k.shape} (dilation {dilation}) does not fit input {xp.shape}")
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
    flat = cols.reshape(n, c * kh * kw, ho * wo)
    out = np.matmul(k.reshape(o, -1), flat).reshape(n, o, ho, wo)
    return out, cols


def _corr_input_grad(g: np.ndarray, k: np.ndarray, padded_shape: tuple, stride: int, dilation: int) -> np.ndarray:
    n, o, ho, wo = g.shape
    _, c, kh, kw = k.shape
    dcols = np.matmul(k.reshape(o, -1).T, g.reshape(n, o, ho * wo))
    return _col2im(dcols.reshape(n, c, kh, kw, ho, wo), padded_shape, stride, dilation)


def _corr_kernel_grad(g: np.ndarray, cols: np.ndarray) -> np.ndarray:
    n, o, ho, wo = g.shape
    _, c, kh, kw = cols.shape[:4]
    flat = cols.reshape(n, c * kh * kw, ho * wo)
    dk = np.einsum("nol,nkl->ok", g.reshape(n, o, ho * wo), flat, optimize=True)
    return dk.reshape(o, c, kh, kw)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, dilation: int = 1,
           padding: str = "valid") -> Tensor:
    """2-d cross-correlation with stride, dilation and "same"/"valid" padding."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    _check_conv(x.data, kernel.data, "conv2d")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(f"conv2d: input shape {x.shape} has {x.shape[1]} channels but "
                         f"kernel shape {kernel.shape} expects {kernel.shape[1]}")
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be positive")
    if padding == "same":
        t, b, l, r = same_padding(x.shape[2], x.shape[3], kernel.shape[2], kernel.shape[3], stride, dilation)
    elif padding == "valid":
        t = b = l = r = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (t, b), (l, r))) if (t or b or l or r) else x.data
    out, cols = _corr(xp, kernel.data, stride, dilation)
    h, w = x.shape[2:]

    def fn(g):
        dx = dk = None
        if x.requires_grad:
            dxp = _corr_input_grad(g, kernel.data, xp.shape, stride, dilation)
            dx = dxp[:, :, t:t + h, l:l + w]
        if kernel.requires_grad:
            dk = _corr_kernel_grad(g, cols)
        return dx, dk

    return _make(out, (x, kernel), fn)


def conv2d_transpose(x: Tensor, kernel: Tensor, stride: int = 2) -> Tensor:
    """Fractionally strided convolution, the adjoint of a "valid" ``conv2d``.

    ``kernel`` has shape ``(in_channels, out_channels, kh, kw)``, i.e. the
    kernel of the forward convolution this op transposes.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    _check_conv(x.data, kernel.data, "conv2d_transpose")
    if x.shape[1] != kernel.shape[0]:
        raise ValueError(f"conv2d_transpose: input shape {x.shape} has {x.shape[1]} channels but "
                         f"kernel shape {kernel.shape} expects {kernel.shape[0]}")
    n, _, h, w = x.shape
    _, c, kh, kw = kernel.shape
    out_shape = (n, c, (h - 1) * stride + kh, (w - 1) * stride + kw)
    out = _corr_input_grad(x.data, kernel.data, out_shape, stride, 1)

    def fn(g):
        gx, cols = _corr(g, kernel.data, stride, 1)
        dk = _corr_kernel_grad(x.data, cols) if kernel.requires_grad else None
        return (gx if x.requires_grad else None), dk

    return _make(out, (x, kernel), fn)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic 1-d linear interpolation matrix, half-pixel centers."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def bilinear_upsample(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Bilinear resize to a larger grid (align-corners-false convention)."""
    x = _as_tensor(x)
    h, w = x.shape[-2:]
    if target_h < h or target_w < w:
        raise ValueError(f"bilinear_upsample: target {(target_h, target_w)} is smaller than input {(h, w)}")
    if (target_h, target_w) == (h, w):
        return _make(x.data.copy(), (x,), lambda g: (g,))
    mh = _interp_matrix(h, target_h).astype(x.data.dtype)
    mw = _interp_matrix(w, target_w).astype(x.data.dtype)
    out = np.einsum("ih,nchw,jw->ncij", mh, x.data, mw, optimize=True)

    def fn(g):
        return (np.einsum("ih,ncij,jw->nchw", mh, g, mw, optimize=True),)

    return _make(out, (x,), fn)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

class BatchNormStats:
    """Running mean/variance for one batch-norm layer."""

    def __init__(self, channels: int, decay: float = 0.9):
        if not 0.0 < decay < 1.0:
            raise ValueError(f"ema decay must lie in (0, 1), got {decay}")
        self.mean = np.zeros(channels, dtype=DEFAULT_DTYPE)
        self.var = np.ones(channels, dtype=DEFAULT_DTYPE)
        self.decay = decay


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats,
               training: bool = True) -> Tensor:
    """Per-channel batch normalization followed by the affine transform."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or stats.mean.shape != (c,):
        raise ValueError(f"batch_norm: expected per-channel parameters of length {c}")
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.data.size // c
        unbiased = var * count / max(count - 1, 1)
        stats.mean = stats.decay * stats.mean + (1 - stats.decay) * mu
        stats.var = stats.decay * stats.var + (1 - stats.decay) * unbiased
    else:
        mu, var = stats.mean, stats.var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def fn(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx = g * gamma.data.reshape(bshape)
        if training:
            dx = inv.reshape(bshape) * (gx - gx.mean(axis=axes, keepdims=True)
                                        - xhat * (gx * xhat).mean(axis=axes, keepdims=True))
        else:
            dx = gx * inv.reshape(bshape)
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), fn)


def batch_norm_relu(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats,
                    training: bool = True) -> Tensor:
    return relu(batch_norm(x, gamma, beta, stats, training))


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=DEFAULT_DTYPE), requires_grad=True, name=name)


def uniform_init(shape: tuple, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Centered uniform init with bound ``sqrt(6 / fan_in)``."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
