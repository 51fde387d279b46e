"""Slow, loop-based reference implementations used only by the tests."""

import math

import numpy as np


def layernorm_loop(x, gamma, beta, eps=1e-5):
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape[:-1]):
        v = x[idx]
        mu = sum(v) / len(v)
        var = sum((a - mu) ** 2 for a in v) / len(v)
        out[idx] = [(a - mu) / math.sqrt(var + eps) * g + b for a, g, b in zip(v, gamma, beta)]
    return out


def gelu_scalar(a):
    return 0.5 * a * (1.0 + math.erf(a / math.sqrt(2.0)))


def depthwise_conv_loop(x, kernel, bias):
    """x (H,W,D,C) channel-last, kernel (C,1,m,m,m), zero padding m//2."""
    H, W, D, C = x.shape
    m = kernel.shape[-1]
    r = m // 2
    out = np.zeros_like(x)
    for i in range(H):
        for j in range(W):
            for l in range(D):
                for c in range(C):
                    acc = bias[c]
                    for a in range(m):
                        for b in range(m):
                            for e in range(m):
                                ii, jj, ll = i + a - r, j + b - r, l + e - r
                                if 0 <= ii < H and 0 <= jj < W and 0 <= ll < D:
                                    acc += kernel[c, 0, a, b, e] * x[ii, jj, ll, c]
                    out[i, j, l, c] = acc
    return out


def trilinear_scalar(field, point):
    """Border-clamped trilinear interpolation of field (H,W,D,C) at one point."""
    dims = field.shape[:3]
    lo, frac = [], []
    for coord, n in zip(point, dims):
        c = min(max(coord, 0.0), n - 1.0)
        i0 = min(int(math.floor(c)), max(n - 2, 0))
        lo.append(i0)
        frac.append(c - i0)
    out = np.zeros(field.shape[-1])
    for a in (0, 1):
        for b in (0, 1):
            for e in (0, 1):
                w = ((frac[0] if a else 1 - frac[0]) * (frac[1] if b else 1 - frac[1])
                     * (frac[2] if e else 1 - frac[2]))
                idx = [lo[0] + a, lo[1] + b, lo[2] + e]
                if any(k >= n for k, n in zip(idx, dims)):
                    continue
                out += w * field[idx[0], idx[1], idx[2]]
    return out


def dw_mca_loop(xb, xr, P, n_heads, window, deformable=True):
    """Unshifted DW-MCA block with every step written out as loops.

    ``P`` maps the block parameter names to arrays. The grid must be divisible
    by the window.
    """
    H, W, D, C = xb.shape
    Dk = C // n_heads
    h, w, d = window
    xb_n = layernorm_loop(xb, P["norm_b_gamma"], P["norm_b_beta"])
    xr_n = layernorm_loop(xr, P["norm_r_gamma"], P["norm_r_beta"])
    if deformable:
        hid = depthwise_conv_loop(xb_n + xr_n, P["offset_dw_kernel"], P["offset_dw_bias"])
        hid = np.vectorize(gelu_scalar)(hid)
        off = np.einsum("hwdc,co->hwdo", hid, P["offset_pw_weight"]) + P["offset_pw_bias"]
    else:
        off = np.zeros((H, W, D, 3 * n_heads))
    q = np.einsum("hwdc,co->hwdo", xr_n, P["u_q"])
    k = np.einsum("hwdc,co->hwdo", xb_n, P["u_k"])
    v = np.einsum("hwdc,co->hwdo", xb_n, P["u_v"])
    attn = np.zeros_like(xb)
    for s0 in range(0, H, h):
        for s1 in range(0, W, w):
            for s2 in range(0, D, d):
                pos = [(s0 + a, s1 + b, s2 + e) for a in range(h) for b in range(w) for e in range(d)]
                for head in range(n_heads):
                    cs = slice(head * Dk, (head + 1) * Dk)
                    qs = [trilinear_scalar(q[..., cs], np.array(p, float) + off[p][3 * head:3 * head + 3])
                          for p in pos]
                    for qi, p in zip(qs, pos):
                        scores = [float(qi @ k[pk][cs]) / math.sqrt(Dk) for pk in pos]
                        mx = max(scores)
                        ex = [math.exp(s - mx) for s in scores]
                        tot = sum(ex)
                        attn[p][cs] = sum((e / tot) * v[pk][cs] for e, pk in zip(ex, pos))
    x = xb + np.einsum("hwdc,co->hwdo", attn, P["proj_w"]) + P["proj_b"]
    y = layernorm_loop(x, P["norm_mlp_gamma"], P["norm_mlp_beta"])
    y = np.vectorize(gelu_scalar)(np.einsum("hwdc,co->hwdo", y, P["fc1_w"]) + P["fc1_b"])
    return x + np.einsum("hwdc,co->hwdo", y, P["fc2_w"]) + P["fc2_b"]


# -- metric oracles ------------------------------------------------------------

def det3(m):
    return (m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]))


def _deriv(u, comp, axis, idx, kind):
    """Derivative of u[comp] along axis at idx: 'c' central (one-sided at borders), 'f'/'b'."""
    n = u.shape[axis + 1]
    i = idx[axis]

    def at(k):
        j = list(idx)
        j[axis] = k
        return u[(comp,) + tuple(j)]

    if kind == "c":
        if i == 0:
            return at(1) - at(0)
        if i == n - 1:
            return at(n - 1) - at(n - 2)
        return (at(i + 1) - at(i - 1)) / 2.0
    if kind == "f":
        return at(i + 1) - at(i) if i < n - 1 else at(n - 1) - at(n - 2)
    return at(i) - at(i - 1) if i > 0 else at(1) - at(0)


def jacobian_loop(u):
    H, W, D = u.shape[1:]
    out = np.empty((H, W, D))
    for idx in np.ndindex(H, W, D):
        m = [[_deriv(u, c, a, idx, "c") + (1.0 if c == a else 0.0) for a in range(3)] for c in range(3)]
        out[idx] = det3(m)
    return out


def invertibility_loop(u):
    det = jacobian_loop(u)
    vals = det.reshape(-1)
    logs = [math.log(max(v, 1e-9)) for v in vals]
    mu = sum(logs) / len(logs)
    sd = math.sqrt(sum((x - mu) ** 2 for x in logs) / len(logs))
    nonpos = 100.0 * sum(1 for v in vals if v <= 0) / len(vals)
    ndv_total = 0.0
    for idx in np.ndindex(*u.shape[1:]):
        acc = 0.0
        for kinds in [(a, b, c) for a in "fb" for b in "fb" for c in "fb"]:
            m = [[_deriv(u, comp, ax, idx, kinds[ax]) + (1.0 if comp == ax else 0.0) for ax in range(3)]
                 for comp in range(3)]
            acc += max(0.0, -det3(m))
        ndv_total += acc / 8.0
    return sd, nonpos, 100.0 * ndv_total / vals.size


def dice_loop(a, b, label):
    inter = na = nb = 0
    for idx in np.ndindex(a.shape):
        ia, ib = a[idx] == label, b[idx] == label
        na += ia
        nb += ib
        inter += ia and ib
    return 2.0 * inter / (na + nb)


def boundary_loop(mask):
    pts = []
    H, W, D = mask.shape
    for i, j, l in np.ndindex(H, W, D):
        if not mask[i, j, l]:
            continue
        for di, dj, dl in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            ii, jj, ll = i + di, j + dj, l + dl
            if not (0 <= ii < H and 0 <= jj < W and 0 <= ll < D) or not mask[ii, jj, ll]:
                pts.append((i, j, l))
                break
    return pts


def _percentile95(vals):
    s = sorted(vals)
    pos = 0.95 * (len(s) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


def hd95_loop(a, b, label):
    pa, pb = boundary_loop(a == label), boundary_loop(b == label)

    def directed(p, q):
        return [min(math.dist(x, y) for y in q) for x in p]

    return max(_percentile95(directed(pa, pb)), _percentile95(directed(pb, pa)))
