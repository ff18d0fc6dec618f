"""Dense layer kernels behind the autograd ops.

Convolutions have two interchangeable implementations: numba loop kernels
(parallel over batch x output channel, deterministic) and vectorized numpy
im2col/tensordot equivalents used on the numpy backend. Pooling, transposed
convolution, and batch norm are cheap relative to the convolutions and stay
in plain numpy on both backends.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import backend
from .backend import njit, prange


_ROW_BLOCK = 16


@njit(cache=True, parallel=True, fastmath=True)
def _conv2d_fwd_kernel(xp, w, b, out):
    # xp (N, Ci, H+2p, W+2p), w (Co, Ci, K, K), out (N, Co, H, W)
    # tasks are row blocks; each padded input row is read once and applied
    # to every output channel while it sits in cache; the 3x3 taps are
    # unrolled so the inner loop runs 9 fused multiply-adds per pixel
    n_n, n_co, n_h, n_w = out.shape
    n_ci = w.shape[1]
    k = w.shape[2]
    blocks_per_n = (n_h + _ROW_BLOCK - 1) // _ROW_BLOCK
    for task in prange(n_n * blocks_per_n):
        n = task // blocks_per_n
        h0 = (task % blocks_per_n) * _ROW_BLOCK
        h1 = min(h0 + _ROW_BLOCK, n_h)
        acc = np.empty((n_co, n_w), dtype=out.dtype)
        for h in range(h0, h1):
            for co in range(n_co):
                bias = b[co]
                for j in range(n_w):
                    acc[co, j] = bias
            if k == 3:
                for ci in range(n_ci):
                    x0 = xp[n, ci, h]
                    x1 = xp[n, ci, h + 1]
                    x2 = xp[n, ci, h + 2]
                    for co in range(n_co):
                        row = acc[co]
                        w00 = w[co, ci, 0, 0]
                        w01 = w[co, ci, 0, 1]
                        w02 = w[co, ci, 0, 2]
                        w10 = w[co, ci, 1, 0]
                        w11 = w[co, ci, 1, 1]
                        w12 = w[co, ci, 1, 2]
                        w20 = w[co, ci, 2, 0]
                        w21 = w[co, ci, 2, 1]
                        w22 = w[co, ci, 2, 2]
                        for j in range(n_w):
                            row[j] += (
                                w00 * x0[j] + w01 * x0[j + 1] + w02 * x0[j + 2]
                                + w10 * x1[j] + w11 * x1[j + 1] + w12 * x1[j + 2]
                                + w20 * x2[j] + w21 * x2[j + 1] + w22 * x2[j + 2]
                            )
            else:
                for ci in range(n_ci):
                    for kh in range(k):
                        xrow = xp[n, ci, h + kh]
                        for co in range(n_co):
                            row = acc[co]
                            for kw in range(k):
                                wv = w[co, ci, kh, kw]
                                for j in range(n_w):
                                    row[j] += wv * xrow[j + kw]
            for co in range(n_co):
                orow = out[n, co, h]
                for j in range(n_w):
                    orow[j] = acc[co, j]


@njit(cache=True, parallel=True, fastmath=True)
def _conv2d_dw_kernel(xp, dy, dw):
    # dw (Co, Ci, K, K); nine running sums per (co, ci) pair for 3x3
    n_co, n_ci, k, _ = dw.shape
    n_n, _, n_h, n_w = dy.shape
    zero = xp[0, 0, 0, 0] - xp[0, 0, 0, 0]
    for idx in prange(n_co * n_ci):
        co = idx // n_ci
        ci = idx % n_ci
        if k == 3:
            s00 = zero
            s01 = zero
            s02 = zero
            s10 = zero
            s11 = zero
            s12 = zero
            s20 = zero
            s21 = zero
            s22 = zero
            for n in range(n_n):
                for h in range(n_h):
                    yrow = dy[n, co, h]
                    x0 = xp[n, ci, h]
                    x1 = xp[n, ci, h + 1]
                    x2 = xp[n, ci, h + 2]
                    for j in range(n_w):
                        y = yrow[j]
                        s00 += y * x0[j]
                        s01 += y * x0[j + 1]
                        s02 += y * x0[j + 2]
                        s10 += y * x1[j]
                        s11 += y * x1[j + 1]
                        s12 += y * x1[j + 2]
                        s20 += y * x2[j]
                        s21 += y * x2[j + 1]
                        s22 += y * x2[j + 2]
            dw[co, ci, 0, 0] = s00
            dw[co, ci, 0, 1] = s01
            dw[co, ci, 0, 2] = s02
            dw[co, ci, 1, 0] = s10
            dw[co, ci, 1, 1] = s11
            dw[co, ci, 1, 2] = s12
            dw[co, ci, 2, 0] = s20
            dw[co, ci, 2, 1] = s21
            dw[co, ci, 2, 2] = s22
        else:
            for kh in range(k):
                for kw in range(k):
                    s = zero
                    for n in range(n_n):
                        for h in range(n_h):
                            yrow = dy[n, co, h]
                            xrow = xp[n, ci, h + kh]
                            for j in range(n_w):
                                s += yrow[j] * xrow[j + kw]
                    dw[co, ci, kh, kw] = s


def _pad2d(x, p):
    if p == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p:-p, p:-p] = x
    return out


def _conv2d_fwd_np(xp, w, b):
    k = w.shape[2]
    xv = sliding_window_view(xp, (k, k), axis=(2, 3))  # (N, Ci, H, W, K, K)
    y = np.tensordot(xv, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, H, W, Co)
    y = np.ascontiguousarray(np.moveaxis(y, 3, 1))
    y += b[None, :, None, None]
    return y


def conv2d_forward(x, w, b, padding):
    """Cross-correlation with zero padding, stride 1. Returns (y, x_padded);
    the padded input is reused by the backward pass."""
    xp = _pad2d(x, padding)
    n, _, hp, wp = xp.shape
    k = w.shape[2]
    if not backend.using_numba():
        return _conv2d_fwd_np(xp, w, b), xp
    out = np.empty((n, w.shape[0], hp - k + 1, wp - k + 1), dtype=x.dtype)
    _conv2d_fwd_kernel(xp, w, b, out)
    return out, xp


def conv2d_backward(xp, w, dy, padding):
    """Gradients of conv2d_forward w.r.t. input, weights, bias."""
    k = w.shape[2]
    db = dy.sum(axis=(0, 2, 3))
    dy = np.ascontiguousarray(dy)
    numba = backend.using_numba()
    if numba:
        dw = np.empty_like(w)
        _conv2d_dw_kernel(xp, dy, dw)
    else:
        xv = sliding_window_view(xp, (k, k), axis=(2, 3))
        dw = np.tensordot(dy, xv, axes=([0, 2, 3], [0, 2, 3]))
    # dx is a full correlation of dy with channel-swapped, flipped weights
    q = k - 1 - padding
    dyp = _pad2d(dy, q)
    w_t = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    zero_b = np.zeros(w.shape[1], dtype=dy.dtype)
    if numba:
        n, _, hp, wp = dyp.shape
        dx = np.empty((n, w.shape[1], hp - k + 1, wp - k + 1), dtype=dy.dtype)
        _conv2d_fwd_kernel(dyp, w_t, zero_b, dx)
    else:
        dx = _conv2d_fwd_np(dyp, w_t, zero_b)
    return dx, dw.astype(w.dtype, copy=False), db


def maxpool2_forward(x):
    """2x2 max pooling; ties resolve to the first element in row-major
    order inside each window. Returns (y, argmax indices)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError("maxpool2 requires even spatial dims")
    x6 = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = x6.argmax(axis=-1)
    y = np.take_along_axis(x6, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2_backward(dy, idx, h, w):
    n, c, h2, w2 = dy.shape
    g6 = np.zeros((n, c, h2, w2, 4), dtype=dy.dtype)
    np.put_along_axis(g6, idx[..., None], dy[..., None], axis=-1)
    dx = (
        g6.reshape(n, c, h2, w2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h, w)
    )
    return np.ascontiguousarray(dx)


def conv_transpose2_forward(x, w, b):
    """Transposed convolution, 2x2 kernel, stride 2 (non-overlapping):
    doubles the spatial dims."""
    n, ci, h, wd = x.shape
    co = w.shape[1]
    y6 = np.einsum("nchw,cdij->ndhiwj", x, w, optimize=True)
    y = y6.reshape(n, co, 2 * h, 2 * wd) + b[None, :, None, None]
    return np.ascontiguousarray(y.astype(x.dtype, copy=False))


def conv_transpose2_backward(x, w, dy):
    n, co, h2, w2 = dy.shape
    dy6 = dy.reshape(n, co, h2 // 2, 2, w2 // 2, 2)
    dx = np.einsum("ndhiwj,cdij->nchw", dy6, w, optimize=True)
    dw = np.einsum("nchw,ndhiwj->cdij", x, dy6, optimize=True)
    db = dy.sum(axis=(0, 2, 3))
    return (
        np.ascontiguousarray(dx.astype(x.dtype, copy=False)),
        dw.astype(w.dtype, copy=False),
        db,
    )


@njit(cache=True, parallel=True, fastmath=True)
def _bn_stats_kernel(x):
    # per-channel biased mean/variance in one pass
    n_n, n_c, n_h, n_w = x.shape
    mean = np.empty(n_c, dtype=np.float64)
    var = np.empty(n_c, dtype=np.float64)
    m = n_n * n_h * n_w
    for c in prange(n_c):
        s = 0.0
        s2 = 0.0
        for n in range(n_n):
            for h in range(n_h):
                row = x[n, c, h]
                for j in range(n_w):
                    v = row[j]
                    s += v
                    s2 += v * v
        mu = s / m
        mean[c] = mu
        var[c] = s2 / m - mu * mu
    return mean, var


@njit(cache=True, parallel=True, fastmath=True)
def _bn_normalize_kernel(x, mean, inv_std, gamma, beta, out):
    n_n, n_c, n_h, n_w = x.shape
    for idx in prange(n_n * n_c):
        n = idx // n_c
        c = idx % n_c
        mu = mean[c]
        a = gamma[c] * inv_std[c]
        bshift = beta[c]
        for h in range(n_h):
            xrow = x[n, c, h]
            orow = out[n, c, h]
            for j in range(n_w):
                orow[j] = a * (xrow[j] - mu) + bshift
    return out


@njit(cache=True, parallel=True, fastmath=True)
def _bn_backward_sums_kernel(x, gr, mean, inv_std):
    # S1[c] = sum gr, S2[c] = sum gr * xhat
    n_n, n_c, n_h, n_w = x.shape
    s1 = np.empty(n_c, dtype=np.float64)
    s2 = np.empty(n_c, dtype=np.float64)
    for c in prange(n_c):
        a1 = 0.0
        a2 = 0.0
        mu = mean[c]
        inv = inv_std[c]
        for n in range(n_n):
            for h in range(n_h):
                xrow = x[n, c, h]
                grow = gr[n, c, h]
                for j in range(n_w):
                    g = grow[j]
                    a1 += g
                    a2 += g * (xrow[j] - mu) * inv
        s1[c] = a1
        s2[c] = a2
    return s1, s2


@njit(cache=True, parallel=True, fastmath=True)
def _bn_backward_dx_kernel(x, gr, mean, inv_std, gamma, s1, s2, out):
    n_n, n_c, n_h, n_w = x.shape
    m = n_n * n_h * n_w
    for idx in prange(n_n * n_c):
        n = idx // n_c
        c = idx % n_c
        mu = mean[c]
        inv = inv_std[c]
        scale = gamma[c] * inv / m
        b1 = s1[c]
        b2 = s2[c]
        for h in range(n_h):
            xrow = x[n, c, h]
            grow = gr[n, c, h]
            orow = out[n, c, h]
            for j in range(n_w):
                xhat = (xrow[j] - mu) * inv
                orow[j] = scale * (m * grow[j] - b1 - xhat * b2)
    return out
