# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled conv/pool kernels. Same contracts as kernels.reference.

Loops are arranged so the innermost index runs contiguously over the last
axis, which lets the C compiler vectorize the multiply-accumulate rows.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv3x3_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t f = w.shape[0]
    y_arr = np.zeros((b, f, h, wd), dtype=np.float64)
    cdef double[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t ib, jf, ic, ki, kj, ih, iw, hlo, hhi, wlo, whi, off
    cdef double wgt
    with nogil:
        for ib in range(b):
            for jf in range(f):
                for ic in range(c):
                    for ki in range(3):
                        hlo = 1 - ki if ki == 0 else 0
                        hhi = h if ki <= 1 else h - 1
                        for kj in range(3):
                            wgt = w[jf, ic, ki, kj]
                            if wgt == 0.0:
                                continue
                            off = kj - 1
                            wlo = 1 if kj == 0 else 0
                            whi = wd if kj <= 1 else wd - 1
                            for ih in range(hlo, hhi):
                                for iw in range(wlo, whi):
                                    y[ib, jf, ih, iw] += wgt * x[ib, ic, ih + ki - 1, iw + off]
    return y_arr


def conv3x3_backward(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                     double[:, :, :, ::1] gy):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t f = w.shape[0]
    gx_arr = np.zeros((b, c, h, wd), dtype=np.float64)
    gw_arr = np.zeros((f, c, 3, 3), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t ib, jf, ic, ki, kj, ih, iw, hlo, hhi, wlo, whi, off
    cdef double wgt, acc
    with nogil:
        for ib in range(b):
            for jf in range(f):
                for ic in range(c):
                    for ki in range(3):
                        hlo = 1 - ki if ki == 0 else 0
                        hhi = h if ki <= 1 else h - 1
                        for kj in range(3):
                            off = kj - 1
                            wlo = 1 if kj == 0 else 0
                            whi = wd if kj <= 1 else wd - 1
                            wgt = w[jf, ic, ki, kj]
                            acc = 0.0
                            for ih in range(hlo, hhi):
                                for iw in range(wlo, whi):
                                    gx[ib, ic, ih + ki - 1, iw + off] += wgt * gy[ib, jf, ih, iw]
                                    acc += gy[ib, jf, ih, iw] * x[ib, ic, ih + ki - 1, iw + off]
                            gw[jf, ic, ki, kj] += acc
    return gx_arr, gw_arr


def maxpool2x2_forward(double[:, :, :, ::1] x):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t ho = h // 2, wo = wd // 2
    y_arr = np.zeros((b, c, ho, wo), dtype=np.float64)
    idx_arr = np.zeros((b, c, ho, wo), dtype=np.uint8)
    cdef double[:, :, :, ::1] y = y_arr
    cdef unsigned char[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t ib, ic, ih, iw, best_k
    cdef double v, best
    with nogil:
        for ib in range(b):
            for ic in range(c):
                for ih in range(ho):
                    for iw in range(wo):
                        best = x[ib, ic, 2 * ih, 2 * iw]
                        best_k = 0
                        # scan order (tl, tr, bl, br); ties keep the first max
                        v = x[ib, ic, 2 * ih, 2 * iw + 1]
                        if v > best:
                            best = v; best_k = 1
                        v = x[ib, ic, 2 * ih + 1, 2 * iw]
                        if v > best:
                            best = v; best_k = 2
                        v = x[ib, ic, 2 * ih + 1, 2 * iw + 1]
                        if v > best:
                            best = v; best_k = 3
                        y[ib, ic, ih, iw] = best
                        idx[ib, ic, ih, iw] = <unsigned char> best_k
    return y_arr, idx_arr


def maxpool2x2_backward(unsigned char[:, :, :, ::1] idx, double[:, :, :, ::1] gy,
                        Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t b = gy.shape[0], c = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    gx_arr = np.zeros((b, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t ib, ic, ih, iw, k
    with nogil:
        for ib in range(b):
            for ic in range(c):
                for ih in range(ho):
                    for iw in range(wo):
                        k = idx[ib, ic, ih, iw]
                        gx[ib, ic, 2 * ih + (k >> 1), 2 * iw + (k & 1)] = gy[ib, ic, ih, iw]
    return gx_arr
