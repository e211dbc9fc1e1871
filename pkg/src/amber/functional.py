"""Neural-network primitives recorded as single tape entries.

Each function here computes its forward pass with plain numpy and hands
``tensor.from_op`` a closed-form backward, so the tape stays short and no
intermediate of a fused op is retained beyond what the backward needs.

Convolution deliberately avoids materialising an im2col buffer: with a
3x3x3 kernel that buffer is 27x the input, which does not fit the memory
budget for full-size scenes. Instead the kernel is unrolled offset by
offset; every offset contributes one strided slice and one BLAS matmul.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from .tensor import Tensor, from_op

__all__ = [
    "linear",
    "layer_norm",
    "gelu",
    "softmax",
    "conv2d",
    "conv3d",
    "upsample_bilinear",
    "upsample_trilinear",
    "masked_cross_entropy",
]

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``y = x @ weight + bias`` over the last axis of ``x``.

    weight: (C_in, C_out); bias: (C_out,) or None.
    """
    c_in, c_out = weight.shape
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, c_in)
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(*lead, c_out)

    def bwd(g):
        g2 = g.reshape(-1, c_out)
        gx = (g2 @ weight.data.T).reshape(x.data.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return from_op(out, inputs, bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = xhat * gamma.data + beta.data

    def bwd(g):
        lead_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead_axes)
        dbeta = g.sum(axis=lead_axes)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv_std * (dxhat - m1 - xhat * m2)
        return gx.astype(x.data.dtype, copy=False), dgamma, dbeta

    return from_op(out, (x, gamma, beta), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def bwd(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return from_op(out.astype(x.data.dtype, copy=False), (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return from_op(out, (x,), bwd)


# --- convolution ---------------------------------------------------------

def _tuplify(v, k: int) -> tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * k
    t = tuple(int(i) for i in v)
    if len(t) != k:
        raise ValueError(f"expected {k} values, got {t}")
    return t


def _conv_nd(x: Tensor, weight: Tensor, bias: Optional[Tensor],
             stride, padding, groups: int) -> Tensor:
    """Grouped N-d cross-correlation, one BLAS call per kernel offset."""
    k = weight.ndim - 2
    if x.ndim != k + 2:
        raise ValueError(f"input ndim {x.ndim} does not match {k}-d kernel")
    stride = _tuplify(stride, k)
    padding = _tuplify(padding, k)
    batch, c_in = x.shape[0], x.shape[1]
    c_out, c_in_g = weight.shape[0], weight.shape[1]
    spatial = x.shape[2:]
    ksize = weight.shape[2:]
    if c_in != c_in_g * groups or c_out % groups:
        raise ValueError(
            f"channels {c_in}->{c_out} incompatible with groups={groups} "
            f"and kernel input width {c_in_g}")
    out_sp = tuple((spatial[i] + 2 * padding[i] - ksize[i]) // stride[i] + 1
                   for i in range(k))
    if any(o < 1 for o in out_sp):
        raise ValueError(f"kernel {ksize} larger than padded input {spatial}")

    pad_widths = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    xp = np.pad(x.data, pad_widths) if any(padding) else x.data
    oc_g = c_out // groups
    flat = int(np.prod(out_sp))
    depthwise = groups > 1 and c_in_g == 1 and oc_g == 1

    offsets = list(np.ndindex(*ksize))

    def offset_slices(off):
        return tuple(slice(off[i], off[i] + (out_sp[i] - 1) * stride[i] + 1, stride[i])
                     for i in range(k))

    out = np.zeros((batch, c_out, flat), dtype=x.data.dtype)
    for off in offsets:
        sl = (slice(None), slice(None)) + offset_slices(off)
        patch = xp[sl].reshape(batch, c_in, flat)
        w_off = weight.data[(slice(None), slice(None)) + off]
        if depthwise:
            out += w_off.reshape(1, c_in, 1) * patch
        elif groups == 1:
            out += np.matmul(w_off, patch)
        else:
            p4 = patch.reshape(batch, groups, c_in_g, flat)
            w4 = w_off.reshape(groups, oc_g, c_in_g)
            out += np.matmul(w4, p4).reshape(batch, c_out, flat)
    if bias is not None:
        out += bias.data.reshape(1, c_out, 1)
    out = out.reshape(batch, c_out, *out_sp)

    def bwd(g):
        g3 = g.reshape(batch, c_out, flat)
        gw = np.zeros_like(weight.data)
        gxp = np.zeros_like(xp)
        for off in offsets:
            sl = (slice(None), slice(None)) + offset_slices(off)
            patch = xp[sl].reshape(batch, c_in, flat)
            widx = (slice(None), slice(None)) + off
            if depthwise:
                gw[widx] = (g3 * patch).sum(axis=(0, 2)).reshape(c_out, c_in_g)
                gpatch = weight.data[widx].reshape(1, c_in, 1) * g3
            elif groups == 1:
                gw[widx] = np.matmul(g3, patch.swapaxes(1, 2)).sum(axis=0)
                gpatch = np.matmul(weight.data[widx].T, g3)
            else:
                g4 = g3.reshape(batch, groups, oc_g, flat)
                p4 = patch.reshape(batch, groups, c_in_g, flat)
                gw[widx] = np.matmul(g4, p4.swapaxes(-1, -2)).sum(axis=0).reshape(c_out, c_in_g)
                w4 = weight.data[widx].reshape(groups, oc_g, c_in_g)
                gpatch = np.matmul(w4.swapaxes(-1, -2), g4).reshape(batch, c_in, flat)
            gxp[sl] += gpatch.reshape((batch, c_in) + out_sp)
        if any(padding):
            core = (slice(None), slice(None)) + tuple(
                slice(padding[i], padding[i] + spatial[i]) for i in range(k))
            gx = np.ascontiguousarray(gxp[core])
        else:
            gx = gxp
        if bias is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 2))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return from_op(out, inputs, bwd)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride=1, padding=0, groups: int = 1) -> Tensor:
    """x: (B, C_in, H, W); weight: (C_out, C_in/groups, KH, KW)."""
    return _conv_nd(x, weight, bias, stride, padding, groups)


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride=1, padding=0, groups: int = 1) -> Tensor:
    """x: (B, C_in, D, H, W); weight: (C_out, C_in/groups, KD, KH, KW)."""
    return _conv_nd(x, weight, bias, stride, padding, groups)


# --- linear interpolation resize -----------------------------------------

def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """(n_out, n_in) weights for half-pixel-centre linear resampling."""
    mat = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        w1 = src - i0
        mat[i, i0] += 1.0 - w1
        mat[i, i1] += w1
    return mat


def _apply_last(arr: np.ndarray, mat: np.ndarray) -> np.ndarray:
    return np.matmul(arr, mat.T)


def _resize_axis(arr: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    if axis == arr.ndim - 1 or axis == -1:
        return _apply_last(arr, mat)
    moved = np.moveaxis(arr, axis, -1)
    out = _apply_last(np.ascontiguousarray(moved), mat)
    return np.ascontiguousarray(np.moveaxis(out, -1, axis))


def _upsample_linear_nd(x: Tensor, sizes: Sequence[int]) -> Tensor:
    k = len(sizes)
    if x.ndim != k + 2:
        raise ValueError(f"expected {k + 2}-d input for {k} target sizes, got {x.ndim}-d")
    in_sp = x.shape[2:]
    sizes = tuple(int(s) for s in sizes)
    if sizes == in_sp:
        return x
    # Axes already at target size pass through untouched (exact copy).
    mats = {i: _interp_matrix(in_sp[i], sizes[i], x.data.dtype)
            for i in range(k) if sizes[i] != in_sp[i]}

    out = x.data
    for i, mat in mats.items():
        out = _resize_axis(out, mat, 2 + i)

    def bwd(g):
        gx = g
        for i in sorted(mats, reverse=True):
            gx = _resize_axis(gx, mats[i].T, 2 + i)
        return (gx,)

    return from_op(out, (x,), bwd)


def upsample_bilinear(x: Tensor, size: Sequence[int]) -> Tensor:
    """x: (B, C, H, W) -> (B, C, *size), half-pixel-centre linear weights."""
    return _upsample_linear_nd(x, size)


def upsample_trilinear(x: Tensor, size: Sequence[int]) -> Tensor:
    """x: (B, C, D, H, W) -> (B, C, *size), half-pixel-centre linear weights."""
    return _upsample_linear_nd(x, size)


# --- loss -----------------------------------------------------------------

def masked_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean NLL over pixels whose label is nonzero.

    logits: (B, N_cls, H, W); labels: (B, H, W) integers in [0, N_cls],
    where 0 marks an undefined pixel that contributes neither loss nor
    gradient. Class k>0 maps to logit channel k-1. With no defined pixel
    the loss is exactly 0 and so is the gradient.
    """
    if logits.ndim != 4:
        raise ValueError(f"logits must be (B, N_cls, H, W), got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    n_cls = logits.shape[1]
    if labels.min() < 0 or labels.max() > n_cls:
        raise ValueError(f"labels must lie in [0, {n_cls}]")
    mask = labels != 0
    count = int(mask.sum())
    dtype = logits.data.dtype
    if count == 0:
        return from_op(np.zeros((), dtype=dtype), (logits,),
                       lambda g: (np.zeros_like(logits.data),))

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    idx = np.where(mask, labels - 1, 0)[:, None]
    picked = np.take_along_axis(logp, idx, axis=1)[:, 0]
    loss = -(picked * mask).sum() / count

    def bwd(g):
        scale = (mask / count).astype(dtype)
        grad = np.exp(logp) * scale[:, None]
        np.put_along_axis(grad, idx,
                          np.take_along_axis(grad, idx, axis=1) - scale[:, None],
                          axis=1)
        return (grad * g,)

    return from_op(np.asarray(loss, dtype=dtype), (logits,), bwd)
