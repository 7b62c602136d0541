"""Numba-compiled implementations of the hot kernels.

Same contracts as numpy_kernels.  Convolutions pack one sample at a time
into a (C*kh*kw, oh*ow) im2col matrix with tight compiled loops, then
hand the contraction to BLAS through np.dot, which is where virtually
all the arithmetic happens.  Per-sample packing keeps the scratch
footprint at 1/B of the numpy backend's batched buffers.

No fastmath anywhere: the gemms do not need it and sum_f64 relies on a
fixed left-to-right accumulation order.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _pack(xp, cols, stride):
    # xp: one padded sample (C, Hp, Wp); cols: (C, kh, kw, oh, ow)
    C, kh, kw, oh, ow = cols.shape
    for c in range(C):
        for u in range(kh):
            for v in range(kw):
                for i in range(oh):
                    src = xp[c, i * stride + u]
                    row = cols[c, u, v, i]
                    for j in range(ow):
                        row[j] = src[v + j * stride]


@njit(cache=True)
def _scatter_add(dcols, dxp, stride):
    C, kh, kw, oh, ow = dcols.shape
    for c in range(C):
        for u in range(kh):
            for v in range(kw):
                for i in range(oh):
                    dst = dxp[c, i * stride + u]
                    row = dcols[c, u, v, i]
                    for j in range(ow):
                        dst[v + j * stride] += row[j]


@njit(cache=True)
def conv2d_forward(x, w, bias, stride, pad_h, pad_w):
    B, C, H, W = x.shape
    O, kh, kw = w.shape[0], w.shape[2], w.shape[3]
    oh = (H + 2 * pad_h - kh) // stride + 1
    ow = (W + 2 * pad_w - kw) // stride + 1
    w2 = np.ascontiguousarray(w).reshape(O, C * kh * kw)
    xp = np.zeros((C, H + 2 * pad_h, W + 2 * pad_w), x.dtype)
    cols = np.empty((C * kh * kw, oh * ow), x.dtype)
    cols5 = cols.reshape(C, kh, kw, oh, ow)
    yb = np.empty((O, oh * ow), x.dtype)
    y = np.empty((B, O, oh, ow), x.dtype)
    y3 = y.reshape(B, O, oh * ow)
    for b in range(B):
        xp[:, pad_h:pad_h + H, pad_w:pad_w + W] = x[b]
        _pack(xp, cols5, stride)
        np.dot(w2, cols, yb)
        for o in range(O):
            bo = bias[o]
            for t in range(oh * ow):
                y3[b, o, t] = yb[o, t] + bo
    return y


@njit(cache=True)
def conv2d_input_grad(g, w, stride, pad_h, pad_w, in_h, in_w):
    B, O, oh, ow = g.shape
    C, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    wT = np.ascontiguousarray(np.ascontiguousarray(w).reshape(O, C * kh * kw).T)
    dcols = np.empty((C * kh * kw, oh * ow), g.dtype)
    dcols5 = dcols.reshape(C, kh, kw, oh, ow)
    dxp = np.empty((C, in_h + 2 * pad_h, in_w + 2 * pad_w), g.dtype)
    dx = np.empty((B, C, in_h, in_w), g.dtype)
    for b in range(B):
        gb = g[b].reshape(O, oh * ow)
        np.dot(wT, gb, dcols)
        dxp[:] = 0.0
        _scatter_add(dcols5, dxp, stride)
        dx[b] = dxp[:, pad_h:pad_h + in_h, pad_w:pad_w + in_w]
    return dx


@njit(cache=True)
def conv2d_weight_grad(x, g, stride, pad_h, pad_w, kh, kw):
    B, C, H, W = x.shape
    O, oh, ow = g.shape[1], g.shape[2], g.shape[3]
    xp = np.zeros((C, H + 2 * pad_h, W + 2 * pad_w), x.dtype)
    cols = np.empty((C * kh * kw, oh * ow), x.dtype)
    cols5 = cols.reshape(C, kh, kw, oh, ow)
    dw2 = np.zeros((O, C * kh * kw), x.dtype)
    tmp = np.empty((O, C * kh * kw), x.dtype)
    for b in range(B):
        xp[:, pad_h:pad_h + H, pad_w:pad_w + W] = x[b]
        _pack(xp, cols5, stride)
        gb = g[b].reshape(O, oh * ow)
        np.dot(gb, cols.T, tmp)
        dw2 += tmp
    return dw2.reshape(O, C, kh, kw)


@njit(cache=True)
def maxpool2x2_forward(x):
    B, C, H, W = x.shape
    oh, ow = H // 2, W // 2
    y = np.empty((B, C, oh, ow), x.dtype)
    mask = np.empty((B, C, oh, ow), np.uint8)
    for b in range(B):
        for c in range(C):
            for i in range(oh):
                r0 = x[b, c, 2 * i]
                r1 = x[b, c, 2 * i + 1]
                for j in range(ow):
                    # strict > keeps the first of tied maxima, row-major
                    best = r0[2 * j]
                    code = 0
                    if r0[2 * j + 1] > best:
                        best = r0[2 * j + 1]
                        code = 1
                    if r1[2 * j] > best:
                        best = r1[2 * j]
                        code = 2
                    if r1[2 * j + 1] > best:
                        best = r1[2 * j + 1]
                        code = 3
                    y[b, c, i, j] = best
                    mask[b, c, i, j] = code
    return y, mask


@njit(cache=True)
def maxpool2x2_backward(mask, g):
    B, C, oh, ow = g.shape
    dx = np.zeros((B, C, oh * 2, ow * 2), g.dtype)
    for b in range(B):
        for c in range(C):
            for i in range(oh):
                for j in range(ow):
                    code = mask[b, c, i, j]
                    dx[b, c, 2 * i + (code >> 1), 2 * j + (code & 1)] = g[b, c, i, j]
    return dx


@njit(cache=True)
def sum_f64(x):
    # strict left-to-right f64 accumulation over the flat array
    acc = 0.0
    for i in range(x.size):
        acc += x[i]
    return acc
