# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; see ``_pykernels`` for the reference semantics."""

import numpy as np
from libc.math cimport floor


cdef inline void _axis(double c, Py_ssize_t n, Py_ssize_t* i0, Py_ssize_t* i1,
                       double* f, double* inside) noexcept nogil:
    cdef double hi = <double>(n - 1)
    cdef Py_ssize_t i
    if c >= 0.0 and c <= hi:
        inside[0] = 1.0
    else:
        inside[0] = 0.0
    if c < 0.0:
        c = 0.0
    elif c > hi:
        c = hi
    if n == 1:
        i0[0] = 0
        i1[0] = 0
        f[0] = 0.0
        return
    i = <Py_ssize_t>floor(c)
    if i > n - 2:
        i = n - 2
    i0[0] = i
    i1[0] = i + 1
    f[0] = c - <double>i


def trilinear_forward(const double[:, :, :, :, ::1] x, const double[:, :, ::1] coords):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], D = x.shape[3], C = x.shape[4]
    cdef Py_ssize_t M = coords.shape[1]
    out_arr = np.empty((B, M, C))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, m, ch
    cdef Py_ssize_t ix0, ix1, iy0, iy1, iz0, iz1
    cdef double fx, fy, fz, tmp
    cdef double w000, w001, w010, w011, w100, w101, w110, w111, acc
    with nogil:
        for b in range(B):
            for m in range(M):
                _axis(coords[b, m, 0], H, &ix0, &ix1, &fx, &tmp)
                _axis(coords[b, m, 1], W, &iy0, &iy1, &fy, &tmp)
                _axis(coords[b, m, 2], D, &iz0, &iz1, &fz, &tmp)
                w000 = ((1.0 - fx) * (1.0 - fy)) * (1.0 - fz)
                w001 = ((1.0 - fx) * (1.0 - fy)) * fz
                w010 = ((1.0 - fx) * fy) * (1.0 - fz)
                w011 = ((1.0 - fx) * fy) * fz
                w100 = (fx * (1.0 - fy)) * (1.0 - fz)
                w101 = (fx * (1.0 - fy)) * fz
                w110 = (fx * fy) * (1.0 - fz)
                w111 = (fx * fy) * fz
                for ch in range(C):
                    acc = w000 * x[b, ix0, iy0, iz0, ch]
                    acc = acc + w001 * x[b, ix0, iy0, iz1, ch]
                    acc = acc + w010 * x[b, ix0, iy1, iz0, ch]
                    acc = acc + w011 * x[b, ix0, iy1, iz1, ch]
                    acc = acc + w100 * x[b, ix1, iy0, iz0, ch]
                    acc = acc + w101 * x[b, ix1, iy0, iz1, ch]
                    acc = acc + w110 * x[b, ix1, iy1, iz0, ch]
                    acc = acc + w111 * x[b, ix1, iy1, iz1, ch]
                    out[b, m, ch] = acc
    return out_arr


def trilinear_backward(const double[:, :, :, :, ::1] x, const double[:, :, ::1] coords,
                       const double[:, :, ::1] grad_out):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], D = x.shape[3], C = x.shape[4]
    cdef Py_ssize_t M = coords.shape[1]
    gx_arr = np.zeros((B, H, W, D, C))
    gc_arr = np.zeros((B, M, 3))
    cdef double[:, :, :, :, ::1] gx = gx_arr
    cdef double[:, :, ::1] gc = gc_arr
    cdef Py_ssize_t b, m, ch
    cdef Py_ssize_t ix0, ix1, iy0, iy1, iz0, iz1
    cdef double fx, fy, fz, inx, iny, inz, g
    cdef double ax0, ax1, ay0, ay1, az0, az1
    cdef double v000, v001, v010, v011, v100, v101, v110, v111
    cdef double sx, sy, sz
    with nogil:
        for b in range(B):
            for m in range(M):
                _axis(coords[b, m, 0], H, &ix0, &ix1, &fx, &inx)
                _axis(coords[b, m, 1], W, &iy0, &iy1, &fy, &iny)
                _axis(coords[b, m, 2], D, &iz0, &iz1, &fz, &inz)
                ax0 = 1.0 - fx
                ax1 = fx
                ay0 = 1.0 - fy
                ay1 = fy
                az0 = 1.0 - fz
                az1 = fz
                sx = 0.0
                sy = 0.0
                sz = 0.0
                for ch in range(C):
                    g = grad_out[b, m, ch]
                    v000 = x[b, ix0, iy0, iz0, ch]
                    v001 = x[b, ix0, iy0, iz1, ch]
                    v010 = x[b, ix0, iy1, iz0, ch]
                    v011 = x[b, ix0, iy1, iz1, ch]
                    v100 = x[b, ix1, iy0, iz0, ch]
                    v101 = x[b, ix1, iy0, iz1, ch]
                    v110 = x[b, ix1, iy1, iz0, ch]
                    v111 = x[b, ix1, iy1, iz1, ch]
                    gx[b, ix0, iy0, iz0, ch] += ((ax0 * ay0) * az0) * g
                    gx[b, ix0, iy0, iz1, ch] += ((ax0 * ay0) * az1) * g
                    gx[b, ix0, iy1, iz0, ch] += ((ax0 * ay1) * az0) * g
                    gx[b, ix0, iy1, iz1, ch] += ((ax0 * ay1) * az1) * g
                    gx[b, ix1, iy0, iz0, ch] += ((ax1 * ay0) * az0) * g
                    gx[b, ix1, iy0, iz1, ch] += ((ax1 * ay0) * az1) * g
                    gx[b, ix1, iy1, iz0, ch] += ((ax1 * ay1) * az0) * g
                    gx[b, ix1, iy1, iz1, ch] += ((ax1 * ay1) * az1) * g
                    sx = sx + g * ((v100 - v000) * (ay0 * az0) + (v101 - v001) * (ay0 * az1)
                                   + (v110 - v010) * (ay1 * az0) + (v111 - v011) * (ay1 * az1))
                    sy = sy + g * ((v010 - v000) * (ax0 * az0) + (v011 - v001) * (ax0 * az1)
                                   + (v110 - v100) * (ax1 * az0) + (v111 - v101) * (ax1 * az1))
                    sz = sz + g * ((v001 - v000) * (ax0 * ay0) + (v011 - v010) * (ax0 * ay1)
                                   + (v101 - v100) * (ax1 * ay0) + (v111 - v110) * (ax1 * ay1))
                gc[b, m, 0] = sx * inx
                gc[b, m, 1] = sy * iny
                gc[b, m, 2] = sz * inz
    return gx_arr, gc_arr


def im2col3d(const double[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2], D = x.shape[3]
    cdef Py_ssize_t Ho = (H - k) // stride + 1
    cdef Py_ssize_t Wo = (W - k) // stride + 1
    cdef Py_ssize_t Do = (D - k) // stride + 1
    cols_arr = np.empty((C, k * k * k, Ho * Wo * Do))
    cdef double[:, :, ::1] cols = cols_arr
    cdef Py_ssize_t c, a, bb, cc, i, j, l, r, o
    with nogil:
        for c in range(C):
            r = 0
            for a in range(k):
                for bb in range(k):
                    for cc in range(k):
                        o = 0
                        for i in range(Ho):
                            for j in range(Wo):
                                for l in range(Do):
                                    cols[c, r, o] = x[c, a + i * stride, bb + j * stride, cc + l * stride]
                                    o += 1
                        r += 1
    return cols_arr


def col2im3d(const double[:, :, ::1] cols, shape, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t C = shape[0], H = shape[1], W = shape[2], D = shape[3]
    cdef Py_ssize_t Ho = (H - k) // stride + 1
    cdef Py_ssize_t Wo = (W - k) // stride + 1
    cdef Py_ssize_t Do = (D - k) // stride + 1
    out_arr = np.zeros((C, H, W, D))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t c, a, bb, cc, i, j, l, r, o
    with nogil:
        for c in range(C):
            r = 0
            for a in range(k):
                for bb in range(k):
                    for cc in range(k):
                        o = 0
                        for i in range(Ho):
                            for j in range(Wo):
                                for l in range(Do):
                                    out[c, a + i * stride, bb + j * stride, cc + l * stride] += cols[c, r, o]
                                    o += 1
                        r += 1
    return out_arr
