"""NumPy fallback for the compiled kernels.

Every function here performs the same floating-point operations in the same
order as its counterpart in ``_kernels_cy.pyx``, so both backends return
bit-identical results.
"""

import numpy as np


def fwht_rows(a):
    rows, n = a.shape
    h = 1
    while h < n:
        v = a.reshape(rows, n // (2 * h), 2, h)
        x = v[:, :, 0, :].copy()
        y = v[:, :, 1, :]
        v[:, :, 0, :] += y
        v[:, :, 1, :] = x - y
        h *= 2
    return a


def im2col(x, kh, kw, stride, pad):
    n_img, c_in, h_in, w_in = x.shape
    h_out = (h_in + 2 * pad - kh) // stride + 1
    w_out = (w_in + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c_in, kh, kw, n_img, h_out, w_out))
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, :, u:u + stride * h_out:stride, v:v + stride * w_out:stride]
            cols[:, u, v] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c_in * kh * kw, n_img * h_out * w_out)


def col2im(cols, shape, kh, kw, stride, pad):
    n_img, c_in, h_in, w_in = shape
    h_out = (h_in + 2 * pad - kh) // stride + 1
    w_out = (w_in + 2 * pad - kw) // stride + 1
    blocks = cols.reshape(c_in, kh, kw, n_img, h_out, w_out)
    xp = np.zeros((n_img, c_in, h_in + 2 * pad, w_in + 2 * pad))
    for u in range(kh):
        for v in range(kw):
            xp[:, :, u:u + stride * h_out:stride, v:v + stride * w_out:stride] += (
                blocks[:, u, v].transpose(1, 0, 2, 3)
            )
    return np.ascontiguousarray(xp[:, :, pad:pad + h_in, pad:pad + w_in])


def mckp_suffix(losses, costs, capacity):
    n_items, n_opts = losses.shape
    suf = np.zeros((n_items + 1, capacity + 1))
    for i in range(n_items - 1, -1, -1):
        cand = np.full((n_opts, capacity + 1), np.inf)
        for b in range(n_opts):
            m = int(costs[i, b])
            if m <= capacity:
                cand[b, m:] = losses[i, b] + suf[i + 1, :capacity + 1 - m]
        suf[i] = cand.min(axis=0)
    return suf
