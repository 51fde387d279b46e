"""Pure numpy implementations of the hot kernels.

These are the fallback used when the compiled ``_ckernels`` extension is not
importable. Both backends implement the same four functions with the same
argument conventions and the same floating point evaluation order for the
forward passes, so forward results agree bitwise.

Layouts
-------
trilinear_*  x: (B, H, W, D, C), coords: (B, M, 3) in voxel units.
im2col3d     x: (C, H, W, D) already padded -> (C, k**3, L).
col2im3d     cols: (C, k**3, L) -> (C, H, W, D) padded extents.
"""

import numpy as np


def _axis_terms(c, n):
    """Clamp one coordinate axis and return (i0, i1, frac, inside)."""
    hi = float(n - 1)
    inside = ((c >= 0.0) & (c <= hi)).astype(np.float64)
    c = np.clip(c, 0.0, hi)
    if n == 1:
        i0 = np.zeros(c.shape, dtype=np.intp)
        return i0, i0, np.zeros_like(c), inside
    i0 = np.minimum(np.floor(c).astype(np.intp), n - 2)
    return i0, i0 + 1, c - i0, inside


def _corners(x, coords):
    B, H, W, D, C = x.shape
    ix0, ix1, fx, inx = _axis_terms(coords[..., 0], H)
    iy0, iy1, fy, iny = _axis_terms(coords[..., 1], W)
    iz0, iz1, fz, inz = _axis_terms(coords[..., 2], D)
    b = np.arange(B)[:, None]
    flat = x.reshape(B * H * W * D, C)
    base = b * (H * W * D)
    idx = []
    for ia in (ix0, ix1):
        for ib in (iy0, iy1):
            for ic in (iz0, iz1):
                idx.append(base + (ia * W + ib) * D + ic)
    return flat, idx, (fx, fy, fz), (inx, iny, inz)


def trilinear_forward(x, coords):
    flat, idx, (fx, fy, fz), _ = _corners(x, coords)
    wx = (1.0 - fx, fx)
    wy = (1.0 - fy, fy)
    wz = (1.0 - fz, fz)
    out = None
    n = 0
    for a in range(2):
        for b in range(2):
            for c in range(2):
                w = (wx[a] * wy[b]) * wz[c]
                term = w[..., None] * flat[idx[n]]
                out = term if out is None else out + term
                n += 1
    return out


def trilinear_backward(x, coords, grad_out):
    B, H, W, D, C = x.shape
    flat, idx, (fx, fy, fz), (inx, iny, inz) = _corners(x, coords)
    wx = (1.0 - fx, fx)
    wy = (1.0 - fy, fy)
    wz = (1.0 - fz, fz)
    g = grad_out
    vals = [flat[i] for i in idx]
    # (g . v) per corner, reused for all three coordinate derivatives
    gv = [np.einsum("bmc,bmc->bm", g, v) for v in vals]

    gx = np.zeros(B * H * W * D * C)
    chan = np.arange(C)
    n = 0
    for a in range(2):
        for b in range(2):
            for c in range(2):
                w = (wx[a] * wy[b]) * wz[c]
                target = (idx[n][..., None] * C + chan).ravel()
                gx += np.bincount(target, weights=(w[..., None] * g).ravel(), minlength=gx.size)
                n += 1
    grad_x = gx.reshape(x.shape)

    sgn = (-1.0, 1.0)
    gcx = np.zeros_like(fx)
    gcy = np.zeros_like(fy)
    gcz = np.zeros_like(fz)
    n = 0
    for a in range(2):
        for b in range(2):
            for c in range(2):
                gcx = gcx + sgn[a] * (wy[b] * wz[c]) * gv[n]
                gcy = gcy + sgn[b] * (wx[a] * wz[c]) * gv[n]
                gcz = gcz + sgn[c] * (wx[a] * wy[b]) * gv[n]
                n += 1
    grad_coords = np.stack([gcx * inx, gcy * iny, gcz * inz], axis=-1)
    return grad_x, grad_coords


def im2col3d(x, k, stride):
    C = x.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    Ho, Wo, Do = win.shape[1:4]
    cols = win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(C, k * k * k, Ho * Wo * Do)
    return np.ascontiguousarray(cols)


def col2im3d(cols, shape, k, stride):
    C, H, W, D = shape
    Ho = (H - k) // stride + 1
    Wo = (W - k) // stride + 1
    Do = (D - k) // stride + 1
    out = np.zeros(shape)
    c6 = cols.reshape(C, k, k, k, Ho, Wo, Do)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                out[:, a:a + stride * Ho:stride, b:b + stride * Wo:stride,
                    c:c + stride * Do:stride] += c6[:, a, b, c]
    return out
