# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Mirrors ``_kernels_py`` operation for operation."""

from libc.math cimport INFINITY

import numpy as np


def fwht_rows(double[:, ::1] a):
    """Unnormalized Walsh-Hadamard butterflies along the last axis, in place."""
    cdef Py_ssize_t rows = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t r, h, i, j
    cdef double x, y
    for r in range(rows):
        h = 1
        while h < n:
            i = 0
            while i < n:
                for j in range(i, i + h):
                    x = a[r, j]
                    y = a[r, j + h]
                    a[r, j] = x + y
                    a[r, j + h] = x - y
                i += 2 * h
            h *= 2
    return np.asarray(a)


def im2col(double[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n_img = x.shape[0], c_in = x.shape[1]
    cdef Py_ssize_t h_in = x.shape[2], w_in = x.shape[3]
    cdef Py_ssize_t h_out = (h_in + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t w_out = (w_in + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t positions = h_out * w_out
    out = np.zeros((c_in * kh * kw, n_img * positions), dtype=np.float64)
    cdef double[:, ::1] cols = out
    cdef Py_ssize_t n, c, u, v, i, j, row, yy, xx, base
    for c in range(c_in):
        for u in range(kh):
            for v in range(kw):
                row = (c * kh + u) * kw + v
                for n in range(n_img):
                    base = n * positions
                    for i in range(h_out):
                        yy = i * stride + u - pad
                        if yy < 0 or yy >= h_in:
                            continue
                        for j in range(w_out):
                            xx = j * stride + v - pad
                            if xx < 0 or xx >= w_in:
                                continue
                            cols[row, base + i * w_out + j] = x[n, c, yy, xx]
    return out


def col2im(double[:, ::1] cols, tuple shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n_img = shape[0], c_in = shape[1], h_in = shape[2], w_in = shape[3]
    cdef Py_ssize_t h_out = (h_in + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t w_out = (w_in + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t positions = h_out * w_out
    out = np.zeros((n_img, c_in, h_in, w_in), dtype=np.float64)
    cdef double[:, :, :, ::1] x = out
    cdef Py_ssize_t n, c, u, v, i, j, row, yy, xx, base
    for c in range(c_in):
        for u in range(kh):
            for v in range(kw):
                row = (c * kh + u) * kw + v
                for n in range(n_img):
                    base = n * positions
                    for i in range(h_out):
                        yy = i * stride + u - pad
                        if yy < 0 or yy >= h_in:
                            continue
                        for j in range(w_out):
                            xx = j * stride + v - pad
                            if xx < 0 or xx >= w_in:
                                continue
                            x[n, c, yy, xx] += cols[row, base + i * w_out + j]
    return out


def mckp_suffix(double[:, ::1] losses, long[:, ::1] costs, long capacity):
    """suf[i, c] = min objective of layers i.. with total cost <= c."""
    cdef Py_ssize_t n_items = losses.shape[0], n_opts = losses.shape[1]
    out = np.zeros((n_items + 1, capacity + 1), dtype=np.float64)
    cdef double[:, ::1] suf = out
    cdef Py_ssize_t i, b, c
    cdef long m
    cdef double best, val
    for i in range(n_items - 1, -1, -1):
        for c in range(capacity + 1):
            best = INFINITY
            for b in range(n_opts):
                m = costs[i, b]
                if m <= c:
                    val = losses[i, b] + suf[i + 1, c - m]
                    if val < best:
                        best = val
            suf[i, c] = best
    return out
