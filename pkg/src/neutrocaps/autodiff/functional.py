"""Differentiable operations.

Elementwise binary ops require identical shapes or a Python/numpy scalar operand;
the only broadcast anywhere is the per-channel bias inside :func:`conv2d`.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ParameterError, ShapeError
from .tensor import Tensor, as_tensor, get_default_dtype, make_result


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating))


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def full_like(t: Tensor, value: float) -> Tensor:
    return Tensor(np.full(t.shape, value, dtype=t.dtype))


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return make_result(a.data + a.data.dtype.type(b), (a,), lambda g: (g,), "add")
    b = as_tensor(b)
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return make_result(a.data - a.data.dtype.type(b), (a,), lambda g: (g,), "sub")
    b = as_tensor(b)
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        s = a.data.dtype.type(b)
        return make_result(a.data * s, (a,), lambda g: (g * s,), "mul")
    b = as_tensor(b)
    _same_shape(a, b, "mul")
    return make_result(
        a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul"
    )


def div(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        s = a.data.dtype.type(b)
        return make_result(a.data / s, (a,), lambda g: (g / s,), "div")
    b = as_tensor(b)
    _same_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        gb = g / b.data
        return gb, -gb * out

    return make_result(out, (a, b), backward, "div")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where clamping was active."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return make_result(out, (a,), lambda g: (g * inside,), "clip")


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------
def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return make_result(a.data * pos, (a,), lambda g: (g * pos,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for rank {a.ndim}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), backward, "softmax")


# --------------------------------------------------------------------------
# reductions and shape manipulation
# --------------------------------------------------------------------------
def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return make_result(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out), (a,), backward, "getitem")


def concat_channels(a, b) -> Tensor:
    """Stack ``b``'s channels after ``a``'s along axis 1 (NCHW)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects NCHW tensors")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ShapeError(f"concat_channels: {a.shape} vs {b.shape} differ outside channels")
    c1 = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_result(out, (a, b), lambda g: (g[:, :c1], g[:, c1:]), "concat")


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum with explicit output.

    Each operand's indices must appear in the other operand or in the output, and
    no index may repeat within one operand; these keep the backward a pair of
    einsums.
    """
    a, b = as_tensor(a), as_tensor(b)
    inputs, output = spec.replace(" ", "").split("->")
    sa, sb = inputs.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        letters = s.replace("...", "")
        if len(set(letters)) != len(letters):
            raise ShapeError(f"einsum: repeated index in '{s}'")
        missing = set(letters) - set(other) - set(output)
        if missing:
            raise ShapeError(f"einsum: index {sorted(missing)} is summed within one operand")
    out = np.einsum(spec, a.data, b.data)

    def backward(g):
        ga = np.einsum(f"{output},{sb}->{sa}", g, b.data) if a.requires_grad else None
        gb = np.einsum(f"{output},{sa}->{sb}", g, a.data) if b.requires_grad else None
        # ellipsis dims summed by broadcasting come back with the right rank already
        return ga, gb

    return make_result(np.asarray(out), (a, b), backward, "einsum")


# --------------------------------------------------------------------------
# convolutional building blocks (NCHW)
# --------------------------------------------------------------------------
def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an FCkk kernel plus per-filter bias."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects input [N,C,H,W] and kernel [F,C,kh,kw]")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if stride < 1 or padding < 0:
        raise ParameterError("conv2d: stride must be >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (f,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({f},)")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    # Channels-last views: each kernel offset is one batched matmul over image rows,
    # so no im2col buffer is built or kept for backward.
    xp = x.data.transpose(0, 2, 3, 1)
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    else:
        xp = np.ascontiguousarray(xp)
    kt = np.ascontiguousarray(kernel.data.transpose(2, 3, 1, 0))  # [kh, kw, C, F]

    def window(arr, i, j):
        return arr[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :]

    out = np.zeros((n, ho, wo, f), dtype=np.result_type(xp, kt))
    for i in range(kh):
        for j in range(kw):
            out += window(xp, i, j) @ kt[i, j]
    if bias is not None:
        out += bias.data
    # NCHW view over NHWC memory; the next conv's transpose back is free
    out = out.transpose(0, 3, 1, 2)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gh = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        gk = None
        if kernel.requires_grad:
            gkt = np.empty_like(kt)
            for i in range(kh):
                for j in range(kw):
                    rows = np.matmul(window(xp, i, j).transpose(0, 1, 3, 2), gh)
                    gkt[i, j] = rows.sum(axis=(0, 1))
            gk = np.ascontiguousarray(gkt.transpose(3, 2, 0, 1))
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=gh.dtype)
            for i in range(kh):
                for j in range(kw):
                    window(gxp, i, j)[...] += gh @ kt[i, j].T
            if padding:
                gxp = gxp[:, padding : padding + h, padding : padding + w, :]
            gx = gxp.transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gk
        return gx, gk, gh.sum(axis=(0, 1, 2))

    return make_result(out, parents, backward, "conv2d")


def maxpool2d(x, size: int, stride: int | None = None) -> tuple[Tensor, np.ndarray]:
    """Window maximum; returns the pooled tensor and flat in-window argmax indices.

    Ties go to the first maximum in row-major window order.
    """
    x = as_tensor(x)
    stride = size if stride is None else stride
    if x.ndim != 4:
        raise ShapeError("maxpool2d expects [N,C,H,W]")
    n, c, h, w = x.shape
    if size < 1 or stride < 1 or size > h or size > w:
        raise ShapeError(f"maxpool2d: window {size} does not fit {h}x{w}")
    ho = (h - size) // stride + 1
    wo = (w - size) // stride + 1
    windows = sliding_window_view(x.data, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(n, c, ho, wo, size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        di, dj = np.divmod(arg, size)
        rows = np.arange(ho)[:, None] * stride + di
        cols = np.arange(wo)[None, :] * stride + dj
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gx, (nn, cc, rows, cols), g)
        return (gx,)

    return make_result(np.ascontiguousarray(out), (x,), backward, "maxpool2d"), arg


def upsample2d_nearest(x, factor: int) -> Tensor:
    x = as_tensor(x)
    if factor < 1:
        raise ParameterError("upsample factor must be >= 1")
    if x.ndim != 4:
        raise ShapeError("upsample2d_nearest expects [N,C,H,W]")
    if factor == 1:
        return make_result(x.data.copy(), (x,), lambda g: (g,), "upsample")
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward, "upsample")


# --------------------------------------------------------------------------
# capsule helpers
# --------------------------------------------------------------------------
def squash(s, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to length |s|^2 / (1 + |s|^2), keeping direction."""
    s = as_tensor(s)
    norm = np.sqrt((s.data * s.data).sum(axis=axis, keepdims=True))
    scale = norm / (1.0 + norm * norm)
    out = s.data * scale

    def backward(g):
        # d scale / d norm, divided by norm; finite limit handled by masking norm == 0
        dscale = (1.0 - norm * norm) / (1.0 + norm * norm) ** 2
        safe = np.where(norm > 0, norm, 1.0)
        coeff = np.where(norm > 0, dscale / safe, 0.0)
        proj = (s.data * g).sum(axis=axis, keepdims=True)
        return (g * scale + s.data * coeff * proj,)

    return make_result(out, (s,), backward, "squash")


def vector_norm(v, axis: int = -1) -> Tensor:
    """Euclidean length along ``axis`` (the axis is removed)."""
    v = as_tensor(v)
    norm = np.sqrt((v.data * v.data).sum(axis=axis))

    def backward(g):
        nk = np.expand_dims(norm, axis)
        safe = np.where(nk > 0, nk, 1.0)
        return (np.where(nk > 0, v.data / safe, 0.0) * np.expand_dims(g, axis),)

    return make_result(norm, (v,), backward, "norm")


def topk_average(x, k: int) -> Tensor:
    """Mean of the ``k`` largest entries of each row of an [N, M] tensor.

    Equal values are taken in index order, which keeps selection deterministic.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("topk_average expects [N, M]")
    n, m = x.shape
    if not 1 <= k <= m:
        raise ParameterError(f"K={k} must lie in [1, {m}]")
    order = np.argsort(-x.data, axis=1, kind="stable")[:, :k]
    picked = np.take_along_axis(x.data, order, axis=1)
    out = picked.mean(axis=1)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, order, np.repeat(g[:, None] / k, k, axis=1), axis=1)
        return (gx,)

    return make_result(out, (x,), backward, "topk_average")


def binary_cross_entropy(p, y, eps: float = 1e-7) -> Tensor:
    """Mean of -y log p - (1-y) log(1-p) with p clamped to [eps, 1-eps]."""
    p = clip(as_tensor(p), eps, 1.0 - eps)
    y_arr = np.asarray(y, dtype=p.dtype).reshape(p.shape)
    yt = Tensor(y_arr)
    loss = neg(add(mul(yt, log(p)), mul(Tensor(1.0 - y_arr), log(sub(full_like(p, 1.0), p)))))
    return mean(loss)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad=requires_grad)
