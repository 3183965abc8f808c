"""Differentiable operations over :class:`~fsodm.tensor.Tensor`.

Every function returns a new tensor; inputs are never mutated. Shapes follow
NCHW for image-like data. Broadcasting is limited to tensor-with-scalar.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import DimensionError, Tensor, UsageError

LEAKY_SLOPE = 0.1


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return Tensor._make(a.data + a.data.dtype.type(c), (a,), lambda g: (g,), "add_scalar")
    _same_shape(a, b, "add")
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _same_shape(a, b, "sub")
    return Tensor._make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(float(b))
        return Tensor._make(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0):
        raise DimensionError("log: argument must be strictly positive")
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where clamping was active."""
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return Tensor._make(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape, dtype = a.shape, a.data.dtype
    return Tensor._make(
        np.asarray(a.data.sum(dtype=np.float64), dtype=dtype),
        (a,),
        lambda g: (np.full(shape, g, dtype=dtype),),
        "sum",
    )


def mean(a: Tensor) -> Tensor:
    return mul(sum(a), 1.0 / max(a.size, 1))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from exc
    return Tensor._make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.data.dtype

    def _backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(np.array(a.data[index]), (a,), _backward, "getitem")


def gather(a: Tensor, flat_index: np.ndarray) -> Tensor:
    """Pick elements by flat (row-major) index; result has the index's shape."""
    flat_index = np.asarray(flat_index, dtype=np.int64)
    shape, dtype, size = a.shape, a.data.dtype, a.size

    def _backward(g):
        full = np.bincount(flat_index.reshape(-1), weights=g.reshape(-1), minlength=size)
        return (full.astype(dtype).reshape(shape),)

    return Tensor._make(a.data.reshape(-1)[flat_index], (a,), _backward, "gather")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise UsageError("concat needs at least one tensor")
    ref = tensors[0].shape
    nd = len(ref)
    axis = axis % nd
    for t in tensors[1:]:
        if len(t.shape) != nd or any(t.shape[d] != ref[d] for d in range(nd) if d != axis):
            raise DimensionError(f"concat along axis {axis}: shapes {ref} and {t.shape} disagree off-axis")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(out, tuple(tensors), lambda g: np.split(g, splits, axis=axis), "concat")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise DimensionError("concat_channels expects NCHW tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise DimensionError(
            f"concat_channels: N,H,W mismatch between {a.shape} and {b.shape}"
        )
    return concat([a, b], axis=1)


# ---------------------------------------------------------------------------
# activations


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    ad = a.data
    scale = np.where(ad > 0, ad.dtype.type(1.0), ad.dtype.type(slope))
    return Tensor._make(ad * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), _backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    prob = np.exp(out)

    def _backward(g):
        return (g - prob * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (a,), _backward, "log_softmax")


# ---------------------------------------------------------------------------
# convolution and pooling


def _conv_out(extent: int, k: int, stride: int, padding: int, axis: str) -> int:
    span = extent + 2 * padding - k
    if span < 0:
        raise DimensionError(
            f"conv2d: kernel {k} exceeds padded {axis} extent {extent + 2 * padding}"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Padded NCHW input -> (C*kh*kw, N*ho*wo) patch matrix."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(c, kh, kw, n, ho, wo),
        strides=(sc, sh, sw, sn, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. Output extent is floor((H + 2p - k) / stride) + 1."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be NCHW, got {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d: weight must be KCkhkw, got {weight.shape}")
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if cw != c:
        raise DimensionError(f"conv2d: input channels (axis 1) {c} != weight in-channels (axis 1) {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (k,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({k},)")
    if stride < 1 or padding < 0:
        raise DimensionError("conv2d: stride must be >= 1 and padding >= 0")
    ho = _conv_out(h, kh, stride, padding, "H")
    wo = _conv_out(w, kw, stride, padding, "W")

    xd = x.data
    wmat = weight.data.reshape(k, -1)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = xd.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(k, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(k, n * ho * wo)
        gw = (gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = wmat.T @ gmat
            if pointwise:
                gx = np.ascontiguousarray(gcols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
            else:
                gcols = gcols.reshape(c, kh, kw, n, ho, wo)
                # accumulate channel-major so every add is layout-aligned
                gxp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=xd.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
                gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
                gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor._make(out, parents, _backward, "conv2d")


def maxpool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling. Ties send the gradient to the first element in scan order."""
    if kernel != stride:
        raise DimensionError("maxpool2d: only kernel == stride is supported")
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d: input must be NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise DimensionError(f"maxpool2d: H={h}, W={w} not divisible by kernel {kernel}")
    ho, wo = h // kernel, w // kernel
    win = x.data.reshape(n, c, ho, kernel, wo, kernel).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def _backward(g):
        gw = np.zeros((n, c, ho, wo, kernel * kernel), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, ho, wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(n, c, h, w),)

    return Tensor._make(np.ascontiguousarray(out), (x,), _backward, "maxpool2d")


def global_maxpool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] spatial maximum per channel (first occurrence on ties)."""
    if x.ndim != 4:
        raise DimensionError(f"global_maxpool: input must be NCHW, got {x.shape}")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def _backward(g):
        gf = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(gf, arg[..., None], g[..., None], axis=-1)
        return (gf.reshape(n, c, h, w),)

    return Tensor._make(out, (x,), _backward, "global_maxpool")


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"upsample_nearest2x: input must be NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def _backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._make(out, (x,), _backward, "upsample_nearest2x")


def channelwise_scale(feature: Tensor, vector: Tensor) -> Tensor:
    """Multiply each channel of ``feature`` by a per-channel weight.

    ``vector`` of shape [C] scales every sample alike. ``vector`` of shape
    [M, C] produces M scaled copies per sample, laid out n-major as
    [N*M, C, H, W], i.e. row ``n*M + m`` is ``feature[n] * vector[m]``.
    """
    if feature.ndim != 4:
        raise DimensionError(f"channelwise_scale: feature must be NCHW, got {feature.shape}")
    n, c, h, w = feature.shape
    fd, vd = feature.data, vector.data
    if vector.ndim == 1:
        if vector.shape[0] != c:
            raise DimensionError(f"channelwise_scale: vector length {vector.shape[0]} != channels {c}")
        scale = vd[None, :, None, None]
        out = fd * scale

        def _backward(g):
            return g * scale, (g * fd).sum(axis=(0, 2, 3))

        return Tensor._make(out, (feature, vector), _backward, "channelwise_scale")

    if vector.ndim != 2 or vector.shape[1] != c:
        raise DimensionError(f"channelwise_scale: vectors shape {vector.shape} incompatible with channels {c}")
    m = vector.shape[0]
    out = (fd[:, None] * vd[None, :, :, None, None]).reshape(n * m, c, h, w)

    def _backward_many(g):
        g5 = g.reshape(n, m, c, h, w)
        gf = np.einsum("nmchw,mc->nchw", g5, vd, optimize=True)
        gv = np.einsum("nmchw,nchw->mc", g5, fd, optimize=True)
        return gf, gv

    return Tensor._make(out, (feature, vector), _backward_many, "channelwise_scale")
