"""Differentiable operations on :class:`~corrpm.tensor.Tensor`.

Spatial ops accept ``(C, H, W)`` or batched ``(B, C, H, W)`` inputs.
Convolutions are lowered to one GEMM over im2col windows; the scatter back
(col2im) loops over the ``k*k`` kernel taps only.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from corrpm.tensor import DTYPE, ShapeError, Tensor, as_tensor, count_macs, record_activation


def _batched(x: np.ndarray, name: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{name}: expected (C,H,W) or (B,C,H,W), got {x.shape}")


def conv_output_size(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, dilation: int, oh: int, ow: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(b, c, oh, ow, k, k),
        strides=(sb, sc, sh * stride, sw * stride, sh * dilation, sw * dilation),
        writeable=False,
    )


def _im2col(x: np.ndarray, k: int, stride: int, pad: int, dilation: int) -> tuple[np.ndarray, int, int]:
    b, c, h, w = x.shape
    oh = conv_output_size(h, k, stride, pad, dilation)
    ow = conv_output_size(w, k, stride, pad, dilation)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(np.ascontiguousarray(xp), k, stride, dilation, oh, ow)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * k * k)
    return cols, oh, ow


def _col2im(
    dcols: np.ndarray, shape: tuple[int, int, int, int], k: int, stride: int, pad: int,
    dilation: int, oh: int, ow: int,
) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add windows back onto the input grid."""
    b, c, h, w = shape
    d = dcols.reshape(b, oh, ow, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    for i in range(k):
        r0 = i * dilation
        for j in range(k):
            c0 = j * dilation
            xp[:, :, r0:r0 + stride * (oh - 1) + 1:stride, c0:c0 + stride * (ow - 1) + 1:stride] += d[..., i, j]
    if pad:
        xp = xp[:, :, pad:pad + h, pad:pad + w]
    return xp


def _check_geometry(stride: int, pad: int, dilation: int) -> None:
    if stride < 1 or dilation < 1 or pad < 0:
        raise ValueError(f"invalid geometry stride={stride} pad={pad} dilation={dilation}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation. ``weight`` is ``(C_out, C_in, k, k)``."""
    _check_geometry(stride, pad, dilation)
    xd, squeeze = _batched(x.data, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be (C_out, C_in, k, k), got {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    b, c, h, w = xd.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {c_in} (weight {weight.shape})")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    oh = conv_output_size(h, k, stride, pad, dilation)
    ow = conv_output_size(w, k, stride, pad, dilation)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {k} (dilation {dilation}) does not fit padded input {h}x{w}")

    cols, oh, ow = _im2col(xd, k, stride, pad, dilation)
    wmat = weight.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(b, oh, ow, c_out).transpose(0, 3, 1, 2)
    count_macs("conv2d", b * c_out * c_in * k * k * oh * ow)
    out = np.ascontiguousarray(out[0] if squeeze else out)

    def _backward(g):
        gd = g[None] if squeeze else g
        gmat = gd.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gx = None
        if x.requires_grad:
            gx = _col2im(gmat @ wmat, xd.shape, k, stride, pad, dilation, oh, ow)
            gx = gx[0] if squeeze else gx
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, _backward)


def transposed_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + k


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                      stride: int = 1, pad: int = 0) -> Tensor:
    """Fractionally strided convolution, the input-gradient of :func:`conv2d`.

    ``weight`` is ``(C_in, C_out, k, k)``; using the same array as a conv2d
    weight of shape ``(C_out_conv=C_in, C_in_conv=C_out, k, k)`` makes the two
    ops adjoint.
    """
    _check_geometry(stride, pad, 1)
    xd, squeeze = _batched(x.data, "transposed_conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"transposed_conv2d: weight must be (C_in, C_out, k, k), got {weight.shape}")
    c_in, c_out, k, _ = weight.shape
    b, c, h, w = xd.shape
    if c != c_in:
        raise ShapeError(f"transposed_conv2d: input has {c} channels, weight expects {c_in}")
    oh = transposed_output_size(h, k, stride, pad)
    ow = transposed_output_size(w, k, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"transposed_conv2d: geometry gives non-positive output {oh}x{ow}")
    if conv_output_size(oh, k, stride, pad, 1) != h or conv_output_size(ow, k, stride, pad, 1) != w:
        raise ShapeError("transposed_conv2d: geometry is not invertible for this input size")

    wmat = weight.data.reshape(c_in, -1)
    xmat = xd.transpose(0, 2, 3, 1).reshape(-1, c_in)
    out = _col2im(xmat @ wmat, (b, c_out, oh, ow), k, stride, pad, 1, h, w)
    if bias is not None:
        out += bias.data[:, None, None]
    count_macs("transposed_conv2d", b * c_in * c_out * k * k * h * w)
    out = out[0] if squeeze else out

    def _backward(g):
        gd = g[None] if squeeze else g
        gcols, _, _ = _im2col(gd, k, stride, pad, 1)
        gx = None
        if x.requires_grad:
            gx = (gcols @ wmat.T).reshape(b, h, w, c_in).transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gx[0] if squeeze else gx)
        gw = (xmat.T @ gcols).reshape(weight.shape) if weight.requires_grad else None
        gb = gd.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, _backward)


def interpolation_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Row-stochastic ``(out_size, in_size)`` linear interpolation weights, align-corners."""
    m = np.zeros((out_size, in_size), dtype=DTYPE)
    if in_size == 1 or out_size == 1:
        m[:, 0] = 1.0
        return m
    src = np.arange(out_size) * ((in_size - 1) / (out_size - 1))
    lo = np.minimum(np.floor(src).astype(int), in_size - 2)
    frac = src - lo
    rows = np.arange(out_size)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_upsample: target size {out_h}x{out_w} must be positive")
    if x.ndim < 3:
        raise ShapeError(f"bilinear_upsample: expected (..., C, H, W), got {x.shape}")
    h, w = x.shape[-2:]
    ry = interpolation_matrix(out_h, h)
    rx = interpolation_matrix(out_w, w)
    out = ry @ x.data @ rx.T

    def _backward(g):
        return (ry.T @ g @ rx,)

    return Tensor.from_op(out, (x,), _backward)


def concat_channels(inputs) -> Tensor:
    """Concatenate along the channel axis (third from the end)."""
    inputs = list(inputs)
    if not inputs:
        raise ShapeError("concat_channels: need at least one input")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.ndim != len(ref) or t.shape[:-3] != ref[:-3] or t.shape[-2:] != ref[-2:]:
            raise ShapeError(f"concat_channels: spatial/batch mismatch {t.shape} vs {ref}")
    if len(inputs) == 1:
        return inputs[0]
    out = np.concatenate([t.data for t in inputs], axis=-3)
    bounds = np.cumsum([0] + [t.shape[-3] for t in inputs])

    def _backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1], :, :] for i in range(len(inputs)))

    return Tensor.from_op(out, inputs, _backward)


def matmul(a: Tensor, b: Tensor, label: str = "matmul") -> Tensor:
    """Matrix product over the last two axes; leading batch axes must match.

    ``label`` names the entry in the active :class:`~corrpm.tensor.OpCounter`.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    n, kk = a.shape[-2:]
    m = b.shape[-1]
    batch = int(np.prod(a.shape[:-2], dtype=np.int64))
    out = a.data @ b.data
    count_macs(label, batch * n * kk * m)

    def _backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(out, (a, b), _backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting each row's max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(s, (x,), _backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    record_activation(mask)
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(out, (a, b), _backward)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def _backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(out, (a, b), _backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return Tensor.from_op(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return Tensor.from_op(np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n),))


def reshape(x: Tensor, shape) -> Tensor:
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(
        np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inverse),)
    )
