"""Differentiable operations over :class:`~mfcl.autodiff.tensor.Tensor`.

Arrays follow the N, C, H, W layout for feature maps. Binary elementwise ops
accept numpy broadcasting between operands of the same rank (or a scalar);
the backward pass sums gradients over the broadcast axes.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor

__all__ = [
    "add", "sub", "mul", "div", "power", "exp", "log", "sqrt", "abs",
    "sigmoid", "relu", "leaky_relu", "clamp_min", "sum", "mean", "l1_norm",
    "reshape", "transpose", "index", "concat", "matmul", "softmax",
    "global_avg_pool", "conv2d", "unfold", "fold", "extract_patches",
    "fold_patches", "resample", "bilinear_resize", "upsample_nearest",
    "resize_matrix", "pad2d",
]


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum(), dtype=grad.dtype)
    if len(shape) != grad.ndim:
        raise ValueError(f"cannot broadcast between ranks {len(shape)} and {grad.ndim}")
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    if a.ndim and b.ndim and a.ndim != b.ndim:
        raise ValueError(f"operand ranks differ: {a.shape} vs {b.shape}")
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _check_broadcast(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _check_broadcast(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _check_broadcast(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _check_broadcast(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


def power(x: Tensor, exponent: float) -> Tensor:
    out = x.data ** exponent

    def backward(g):
        return (g * exponent * x.data ** (exponent - 1),)

    return Tensor._from_op(out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * 0.5 / out,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return Tensor._from_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so neither branch overflows
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,),
                           lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """Leaky rectifier; the derivative at exactly 0 takes the negative branch."""
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    return Tensor._from_op(x.data * scale, (x,), lambda g: (g * scale,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    keep = x.data >= floor
    out = np.where(keep, x.data, floor).astype(x.dtype)
    return Tensor._from_op(out, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions and reshapes


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def l1_norm(a: Tensor, b: Tensor | None = None) -> Tensor:
    """Mean absolute value of ``a`` (or of ``a - b``)."""
    diff = a if b is None else sub(a, b)
    return mean(abs(diff))


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def index(x: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(np.asarray(x.data[idx]), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ValueError(f"concat shape mismatch on axis {axis}: {ref} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors)))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis),
                           tensors, backward)


def pad2d(x: Tensor, pad: int) -> Tensor:
    """Zero-pad the two trailing (spatial) axes."""
    if pad == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return Tensor._from_op(np.pad(x.data, widths), (x,),
                           lambda g: (g[..., pad:-pad, pad:-pad],))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast_batch(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast_batch(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), backward)


def _unbroadcast_batch(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return _unbroadcast(g, tuple(shape))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise ValueError(f"axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """N,C,H,W -> N,C,1,1 spatial mean."""
    return mean(x, axis=(2, 3), keepdims=True)


# ---------------------------------------------------------------------------
# convolution and patch views


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(N,C,Hp,Wp) -> strided view (N,C,Ho,Wo,k,k)."""
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _col2im(cols: np.ndarray, padded_shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_windows` for cols laid out as (N,C,Ho,Wo,k,k)."""
    out = np.zeros(padded_shape, dtype=cols.dtype)
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + hs:stride, j:j + ws:stride] += cols[:, :, :, :, i, j]
    return out


def _scatter_windows(cols: np.ndarray, padded_shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Same as :func:`_col2im` for cols laid out as (k,k,N,C,Ho,Wo)."""
    out = np.zeros(padded_shape, dtype=cols.dtype)
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + hs:stride, j:j + ws:stride] += cols[i, j]
    return out


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an N,C,H,W input with an O,C,k,k kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if cw != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    if kh != kw:
        raise ValueError(f"conv2d needs square kernels, got {kh}x{kw}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    k = kh
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ValueError(f"kernel {k} does not fit padded input {h + 2 * pad}x{w + 2 * pad}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"bias shape {bias.shape} != ({o},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = _windows(xp, k, stride)
    ho, wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, weight.data, axes=((1, 4, 5), (1, 2, 3)))  # N,Ho,Wo,O
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, win, axes=((0, 2, 3), (0, 2, 3)))
        if x.requires_grad:
            if stride == 1 and pad <= k - 1:
                # transposed conv == full correlation with the flipped kernel
                e = k - 1 - pad
                gp = np.pad(g, ((0, 0), (0, 0), (e, e), (e, e))) if e else g
                wf = weight.data[:, :, ::-1, ::-1]
                gx = np.tensordot(_windows(gp, k, 1), wf, axes=((1, 4, 5), (0, 2, 3)))
                gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
            else:
                cols = np.tensordot(weight.data, g, axes=((0,), (1,)))  # C,k,k,N,Ho,Wo
                cols = np.ascontiguousarray(cols.transpose(1, 2, 3, 0, 4, 5))
                gxp = _scatter_windows(cols, xp.shape, k, stride, ho, wo)
                gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def unfold(x: Tensor, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    """N,C,H,W -> N, C*k*k, L with rows ordered (channel, row, col)."""
    n, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = _windows(xp, k, stride)
    ho, wo = win.shape[2], win.shape[3]
    out = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)

    def backward(g):
        cols = g.reshape(n, c, k, k, ho, wo).transpose(0, 1, 4, 5, 2, 3)
        gxp = _col2im(cols, xp.shape, k, stride, ho, wo)
        return (gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp,)

    return Tensor._from_op(out, (x,), backward)


def fold(cols: Tensor, out_shape: tuple[int, int, int, int], k: int,
         stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of :func:`unfold`: scatter-add columns back into an N,C,H,W map."""
    n, c, h, w = out_shape
    padded = (n, c, h + 2 * pad, w + 2 * pad)
    ho = _out_size(h, k, stride, pad)
    wo = _out_size(w, k, stride, pad)
    if cols.shape != (n, c * k * k, ho * wo):
        raise ValueError(f"fold expects columns {(n, c * k * k, ho * wo)}, got {cols.shape}")
    arr = cols.data.reshape(n, c, k, k, ho, wo).transpose(0, 1, 4, 5, 2, 3)
    outp = _col2im(arr, padded, k, stride, ho, wo)
    out = outp[:, :, pad:pad + h, pad:pad + w] if pad else outp

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
        win = _windows(gp, k, stride)
        return (win.transpose(0, 1, 4, 5, 2, 3).reshape(cols.shape),)

    return Tensor._from_op(np.ascontiguousarray(out), (cols,), backward)


def extract_patches(x: Tensor, k: int, stride: int) -> Tensor:
    """Patch rows of an N,C,H,W map as an N, L, C*k*k tensor.

    ``stride == k`` tiles the map with non-overlapping patches (H and W must
    be divisible by k). ``stride == 1`` yields one patch per pixel with
    ``(k-1)//2`` zero padding. Rows follow row-major patch position; each row
    is flattened in (channel, row, col) order.
    """
    _, _, h, w = x.shape
    if stride == k:
        for label, extent in (("height", h), ("width", w)):
            if extent % k:
                raise ValueError(
                    f"non-overlapping patches of size {k} need {label} divisible by {k}, got {extent}")
        pad = 0
    elif stride == 1:
        if k % 2 == 0:
            raise ValueError(f"stride-1 patch extraction needs an odd k, got {k}")
        pad = (k - 1) // 2
    else:
        raise ValueError(f"stride must be 1 or k={k}, got {stride}")
    return transpose(unfold(x, k, stride, pad), (0, 2, 1))


def fold_patches(patches: Tensor, out_shape, k: int, stride: int) -> Tensor:
    """Adjoint of :func:`extract_patches`."""
    pad = 0 if stride == k else (k - 1) // 2
    return fold(transpose(patches, (0, 2, 1)), tuple(out_shape), k, stride, pad)


# ---------------------------------------------------------------------------
# resampling


def resize_matrix(n_in: int, n_out: int, mode: str = "bilinear", dtype=np.float64) -> np.ndarray:
    """Dense (n_out, n_in) interpolation matrix along one axis.

    ``bilinear`` uses half-pixel centers with edge clamping; ``nearest``
    picks ``floor(i * n_in / n_out)``.
    """
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    if mode == "nearest":
        m[rows, np.minimum((rows * n_in) // n_out, n_in - 1)] = 1.0
        return m
    if mode != "bilinear":
        raise ValueError(f"unknown resize mode {mode!r}")
    src = (rows + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resample(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Separable linear resampling ``out = R_rows @ x @ R_cols^T``.

    ``rows``/``cols`` are (Ho,H)/(Wo,W) matrices, or per-sample stacks of
    shape (N,Ho,H)/(N,Wo,W).
    """
    rows = np.asarray(rows, dtype=x.dtype)
    cols = np.asarray(cols, dtype=x.dtype)
    if rows.ndim == 2:
        out = np.einsum("ih,nchw,jw->ncij", rows, x.data, cols, optimize=True)

        def backward(g):
            return (np.einsum("ih,ncij,jw->nchw", rows, g, cols, optimize=True),)
    else:
        out = np.einsum("nih,nchw,njw->ncij", rows, x.data, cols, optimize=True)

        def backward(g):
            return (np.einsum("nih,ncij,njw->nchw", rows, g, cols, optimize=True),)

    return Tensor._from_op(out, (x,), backward)


def bilinear_resize(x: Tensor, h: int, w: int) -> Tensor:
    _, _, hi, wi = x.shape
    if (hi, wi) == (h, w):
        return x
    return resample(x, resize_matrix(hi, h), resize_matrix(wi, w))


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor._from_op(out, (x,), backward)
