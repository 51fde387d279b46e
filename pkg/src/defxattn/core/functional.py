"""Differentiable neural-network primitives built on :mod:`.tensor`."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from ..errors import AxisError, ConfigError, ShapeError
from . import kernels
from .tensor import Tensor, _record, as_tensor


def matmul(a, b) -> Tensor:
    """Batched product ``(..., M, K) @ (..., K, N)``.

    ``b`` may also be a plain 2-D weight shared across the batch of ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            k = ad.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record(ad @ bd, "matmul", (a, b), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise AxisError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, "softmax", (x,), bw)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layernorm affine shapes {gamma.shape}/{beta.shape} do not match C={C}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _record(xhat * gd + beta.data, "layernorm", (x, gamma, beta), bw)


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + xd * pdf),)

    return _record(xd * cdf, "gelu", (x,), bw)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0.0, 1.0, slope)
    return _record(x.data * scale, "leaky_relu", (x,), lambda g: (g * scale,))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight (+ bias)`` with weight stored as (C_in, C_out)."""
    y = matmul(x, weight)
    return y if bias is None else y + bias


def conv3d(x, kernel, bias=None, stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation of a channel-first volume (C_in, H, W, D).

    ``kernel`` has shape (C_out, C_in // groups, k, k, k); zero padding.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 5:
        raise ShapeError(f"conv3d expects x (C,H,W,D) and kernel (O,I,k,k,k); got {x.shape}, {kernel.shape}")
    C_in = x.shape[0]
    C_out, cin_g, k = kernel.shape[0], kernel.shape[1], kernel.shape[2]
    if groups < 1 or C_in % groups or C_out % groups:
        raise ConfigError(f"conv3d: channels ({C_in} in, {C_out} out) not divisible by groups={groups}")
    if cin_g != C_in // groups or kernel.shape[2:] != (k, k, k):
        raise ShapeError(f"conv3d kernel {kernel.shape} incompatible with C_in={C_in}, groups={groups}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x.data
    Hp, Wp, Dp = xp.shape[1:]
    if min(Hp, Wp, Dp) < k:
        raise ShapeError(f"conv3d: kernel {k} larger than padded input {xp.shape[1:]}")
    Ho, Wo, Do = ((Hp - k) // stride + 1, (Wp - k) // stride + 1, (Dp - k) // stride + 1)
    L = Ho * Wo * Do
    G = groups
    cout_g = C_out // G
    K = cin_g * k ** 3
    cols = kernels.im2col3d(xp, k, stride).reshape(G, K, L)
    wmat = kernel.data.reshape(G, cout_g, K)
    out = np.matmul(wmat, cols).reshape(C_out, Ho, Wo, Do)
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (C_out,):
            raise ShapeError(f"conv3d bias shape {bias.shape} != ({C_out},)")
        out = out + bias.data[:, None, None, None]
        inputs.append(bias)
    xshape = xp.shape

    def bw(g):
        g2 = g.reshape(G, cout_g, L)
        gk = np.matmul(g2, cols.transpose(0, 2, 1)).reshape(kernel.shape)
        gcols = np.matmul(wmat.transpose(0, 2, 1), g2).reshape(C_in, k ** 3, L)
        gx = kernels.col2im3d(gcols, xshape, k, stride)
        if pad:
            gx = gx[:, pad:pad + x.shape[1], pad:pad + x.shape[2], pad:pad + x.shape[3]]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.reshape(C_out, L).sum(axis=1))
        return grads

    return _record(out, "conv3d", tuple(inputs), bw)


def grid_sample_trilinear(x, coords) -> Tensor:
    """Trilinear sampling of a channel-last field at continuous voxel coordinates.

    ``x`` is (H, W, D, C) with ``coords`` (..., 3), or batched: (B, H, W, D, C)
    with ``coords`` (B, ..., 3). Coordinates outside the grid are clamped to
    the border, and the coordinate gradient is zero there.
    """
    x, coords = as_tensor(x), as_tensor(coords)
    if coords.shape[-1] != 3:
        raise ShapeError(f"coords last extent must be 3, got {coords.shape}")
    batched = x.ndim == 5
    if x.ndim not in (4, 5):
        raise ShapeError(f"grid_sample expects (H,W,D,C) or (B,H,W,D,C), got {x.shape}")
    xb = x.data if batched else x.data[None]
    B, C = xb.shape[0], xb.shape[-1]
    if batched and coords.shape[0] != B:
        raise ShapeError(f"batch of coords {coords.shape[0]} != batch of field {B}")
    out_lead = coords.shape[:-1]
    cb = coords.data.reshape(B, -1, 3)
    out = kernels.trilinear_forward(xb, cb).reshape(out_lead + (C,))

    def bw(g):
        gx, gc = kernels.trilinear_backward(xb, cb, g.reshape(B, -1, C))
        return (gx if batched else gx[0]), gc.reshape(coords.shape)

    return _record(out, "grid_sample", (x, coords), bw)


def _box_sum(a: np.ndarray, w: int, axes) -> np.ndarray:
    r = w // 2
    for ax in axes:
        n = a.shape[ax]
        widths = [(0, 0)] * a.ndim
        widths[ax] = (r + 1, r)
        c = np.cumsum(np.pad(a, widths), axis=ax)
        hi = np.take(c, np.arange(w, w + n), axis=ax)
        lo = np.take(c, np.arange(0, n), axis=ax)
        a = hi - lo
    return a


def box_filter3d(x, window: int) -> Tensor:
    """Sum over a centered cube of odd width on the last three axes (zero padding)."""
    x = as_tensor(x)
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"box window must be a positive odd integer, got {window}")
    axes = (x.ndim - 3, x.ndim - 2, x.ndim - 1)
    # the operator is symmetric, so it is its own adjoint
    return _record(_box_sum(x.data, window, axes), "box_filter", (x,),
                   lambda g: (_box_sum(g, window, axes),))


def linear_axis(x, matrix: np.ndarray, axis: int) -> Tensor:
    """Apply a fixed (N_out, N_in) matrix along one axis."""
    x = as_tensor(x)
    ax = axis % x.ndim
    if matrix.shape[1] != x.shape[ax]:
        raise ShapeError(f"linear_axis: matrix {matrix.shape} vs axis extent {x.shape[ax]}")
    out = np.moveaxis(np.moveaxis(x.data, ax, -1) @ matrix.T, -1, ax)
    return _record(out, "linear_axis", (x,),
                   lambda g: (np.moveaxis(np.moveaxis(g, ax, -1) @ matrix, -1, ax),))


def upsample_matrix(n: int) -> np.ndarray:
    """Linear x2 interpolation matrix, half-pixel centers, border clamped."""
    m = np.zeros((2 * n, n))
    for i in range(2 * n):
        src = (i + 0.5) / 2.0 - 0.5
        src = min(max(src, 0.0), n - 1.0)
        i0 = min(int(math.floor(src)), n - 1)
        f = src - i0
        m[i, i0] += 1.0 - f
        if f > 0.0:
            m[i, i0 + 1] += f
    return m


def upsample2x(x, axes=(1, 2, 3)) -> Tensor:
    """Trilinear x2 upsampling of a channel-first volume."""
    for ax in axes:
        x = linear_axis(x, upsample_matrix(as_tensor(x).shape[ax]), ax)
    return x
