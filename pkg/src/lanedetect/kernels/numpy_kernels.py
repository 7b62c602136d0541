"""Pure numpy implementations of the hot kernels.

Convolutions go through an explicit im2col buffer laid out as
(B, C, kh, kw, oh, ow).  Filling it is kh*kw strided slab copies out of
the padded input, and the contraction is one batched matmul with no
transposes on either side, so the output lands directly in NCHW order.
The scatter direction (conv input gradient, which is also the linear
part of a transposed convolution) runs the same slabs with += into a
padded buffer.

The big intermediates are served from a per-thread scratch pool keyed by
(name, shape, dtype) so steady-state training does not churn hundreds of
megabytes through the allocator every batch.
"""

import threading

import numpy as np

_local = threading.local()


def _scratch(name, shape, dtype):
    pool = getattr(_local, "pool", None)
    if pool is None:
        pool = _local.pool = {}
    key = (name, shape, np.dtype(dtype))
    buf = pool.get(key)
    if buf is None:
        buf = pool[key] = np.empty(shape, dtype)
    return buf


def _out_hw(H, W, kh, kw, stride, pad_h, pad_w):
    oh = (H + 2 * pad_h - kh) // stride + 1
    ow = (W + 2 * pad_w - kw) // stride + 1
    return oh, ow


def _fill_cols(xp, cols, stride, oh, ow):
    # xp: padded input (B,C,Hp,Wp); cols: (B,C,kh,kw,oh,ow)
    kh, kw = cols.shape[2], cols.shape[3]
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xp[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride]


def conv2d_forward(x, w, bias, stride, pad_h, pad_w):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    oh, ow = _out_hw(H, W, kh, kw, stride, pad_h, pad_w)
    if pad_h or pad_w:
        xp = _scratch("xp", (B, C, H + 2 * pad_h, W + 2 * pad_w), x.dtype)
        xp[:] = 0
        xp[:, :, pad_h:pad_h + H, pad_w:pad_w + W] = x
    else:
        xp = x
    cols = _scratch("cols", (B, C, kh, kw, oh, ow), x.dtype)
    _fill_cols(xp, cols, stride, oh, ow)
    y = np.matmul(w.reshape(O, C * kh * kw), cols.reshape(B, C * kh * kw, oh * ow))
    y += bias.reshape(1, O, 1)
    return y.reshape(B, O, oh, ow)


def conv2d_input_grad(g, w, stride, pad_h, pad_w, in_h, in_w):
    B, O, oh, ow = g.shape
    _, C, kh, kw = w.shape
    dcols = np.matmul(w.reshape(O, C * kh * kw).T, g.reshape(B, O, oh * ow))
    dcols = dcols.reshape(B, C, kh, kw, oh, ow)
    dxp = _scratch("dxp", (B, C, in_h + 2 * pad_h, in_w + 2 * pad_w), g.dtype)
    dxp[:] = 0
    for u in range(kh):
        for v in range(kw):
            dxp[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride] += dcols[:, :, u, v]
    if pad_h or pad_w:
        return dxp[:, :, pad_h:pad_h + in_h, pad_w:pad_w + in_w].copy()
    return dxp.copy()


def conv2d_weight_grad(x, g, stride, pad_h, pad_w, kh, kw):
    B, C, H, W = x.shape
    O = g.shape[1]
    oh, ow = g.shape[2], g.shape[3]
    if pad_h or pad_w:
        xp = _scratch("xp", (B, C, H + 2 * pad_h, W + 2 * pad_w), x.dtype)
        xp[:] = 0
        xp[:, :, pad_h:pad_h + H, pad_w:pad_w + W] = x
    else:
        xp = x
    cols = _scratch("cols", (B, C, kh, kw, oh, ow), x.dtype)
    _fill_cols(xp, cols, stride, oh, ow)
    dw = np.matmul(g.reshape(B, O, oh * ow),
                   cols.reshape(B, C * kh * kw, oh * ow).transpose(0, 2, 1))
    return dw.sum(axis=0).reshape(O, C, kh, kw)


def maxpool2x2_forward(x):
    B, C, H, W = x.shape
    win = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(B, C, H // 2, W // 2, 4)
    # argmax takes the first max in row-major window order, the tie rule
    idx = flat.argmax(axis=-1).astype(np.uint8)
    y = np.take_along_axis(flat, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2x2_backward(mask, g):
    B, C, oh, ow = g.shape
    dx = np.zeros((B, C, oh * 2, ow * 2), g.dtype)
    bi = np.arange(B)[:, None, None, None]
    ci = np.arange(C)[None, :, None, None]
    ri = 2 * np.arange(oh)[None, None, :, None] + (mask >> 1)
    cj = 2 * np.arange(ow)[None, None, None, :] + (mask & 1)
    dx[bi, ci, ri, cj] = g
    return dx


def sum_f64(x):
    # cumsum is a strict running sum (numpy applies pairwise blocking only
    # to sum), so this is bit-identical to the numba backend's f64 loop
    if x.size == 0:
        return 0.0
    return float(np.cumsum(x, dtype=np.float64)[-1])
