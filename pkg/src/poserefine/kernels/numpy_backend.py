"""Vectorized NumPy implementations of the hot kernels.

This is the reference/fallback path; the numba backend mirrors these
signatures exactly. All arrays are float64, channels-first, C-order.
Boxes passed to the RoI kernels are already in feature-grid coordinates
(image coords scaled by 1/stride with the half-pixel -0.5 shift applied).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad_hw(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding)))


def conv2d_forward(x, w, b, stride, padding):
    k = w.shape[2]
    win = sliding_window_view(_pad_hw(x, padding), (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    y = np.einsum("cijkl,ockl->oij", win, w, optimize=True)
    y += b[:, None, None]
    return np.ascontiguousarray(y)


def conv2d_input_grad(g, w, stride, padding, in_h, in_w):
    cout, out_h, out_w = g.shape
    cin, k = w.shape[1], w.shape[2]
    # t[ky, kx, ci, oy, ox] = sum_co g[co, oy, ox] * w[co, ci, ky, kx]
    t = np.einsum("oyx,ockl->klcyx", g, w, optimize=True)
    dxp = np.zeros((cin, in_h + 2 * padding, in_w + 2 * padding))
    for ky in range(k):
        for kx in range(k):
            dxp[:, ky:ky + stride * out_h:stride,
                kx:kx + stride * out_w:stride] += t[ky, kx]
    return np.ascontiguousarray(
        dxp[:, padding:padding + in_h, padding:padding + in_w])


def conv2d_weight_grad(g, x, stride, padding, k):
    win = sliding_window_view(_pad_hw(x, padding), (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    dw = np.einsum("oyx,cyxkl->ockl", g, win, optimize=True)
    return np.ascontiguousarray(dw)


def _resize_coords(n_out, n_in, factor):
    # half-pixel (align-corners-false) source coordinates, clamped
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def upsample_forward(x, factor):
    c, h, w = x.shape
    y0, y1, wy = _resize_coords(h * factor, h, factor)
    x0, x1, wx = _resize_coords(w * factor, w, factor)
    top = (1.0 - wx)[None, None, :] * x[:, y0[:, None], x0[None, :]] \
        + wx[None, None, :] * x[:, y0[:, None], x1[None, :]]
    bot = (1.0 - wx)[None, None, :] * x[:, y1[:, None], x0[None, :]] \
        + wx[None, None, :] * x[:, y1[:, None], x1[None, :]]
    out = (1.0 - wy)[None, :, None] * top + wy[None, :, None] * bot
    return np.ascontiguousarray(out)


def upsample_input_grad(g, factor, in_h, in_w):
    c = g.shape[0]
    y0, y1, wy = _resize_coords(in_h * factor, in_h, factor)
    x0, x1, wx = _resize_coords(in_w * factor, in_w, factor)
    dx = np.zeros((c, in_h, in_w))
    ci = np.arange(c)[:, None, None]
    for yi, wgt_y in ((y0, 1.0 - wy), (y1, wy)):
        for xi, wgt_x in ((x0, 1.0 - wx), (x1, wx)):
            np.add.at(dx, (ci, yi[None, :, None], xi[None, None, :]),
                      g * (wgt_y[:, None] * wgt_x[None, :])[None])
    return dx


def _roi_sample_grid(x1, y1, x2, y2, out_h, out_w, ratio):
    bin_h = (y2 - y1) / out_h
    bin_w = (x2 - x1) / out_w
    sy = y1 + (np.arange(out_h * ratio) + 0.5) * (bin_h / ratio)
    sx = x1 + (np.arange(out_w * ratio) + 0.5) * (bin_w / ratio)
    return sy, sx


def _taps(coords, n):
    lo = np.floor(coords).astype(np.int64)
    frac = coords - lo
    hi = lo + 1
    valid_lo = (lo >= 0) & (lo <= n - 1)
    valid_hi = (hi >= 0) & (hi <= n - 1)
    return (np.clip(lo, 0, n - 1), (1.0 - frac) * valid_lo,
            np.clip(hi, 0, n - 1), frac * valid_hi)


def roi_align_forward(feat, x1, y1, x2, y2, out_h, out_w, ratio):
    c, h, w = feat.shape
    sy, sx = _roi_sample_grid(x1, y1, x2, y2, out_h, out_w, ratio)
    ty0, wy0, ty1, wy1 = _taps(sy, h)
    tx0, wx0, tx1, wx1 = _taps(sx, w)
    acc = np.zeros((c, sy.size, sx.size))
    for yi, wgt_y in ((ty0, wy0), (ty1, wy1)):
        for xi, wgt_x in ((tx0, wx0), (tx1, wx1)):
            acc += feat[:, yi[:, None], xi[None, :]] \
                * (wgt_y[:, None] * wgt_x[None, :])[None]
    out = acc.reshape(c, out_h, ratio, out_w, ratio).mean(axis=(2, 4))
    return np.ascontiguousarray(out)


def roi_align_input_grad(g, x1, y1, x2, y2, in_h, in_w, ratio):
    c, out_h, out_w = g.shape
    sy, sx = _roi_sample_grid(x1, y1, x2, y2, out_h, out_w, ratio)
    ty0, wy0, ty1, wy1 = _taps(sy, in_h)
    tx0, wx0, tx1, wx1 = _taps(sx, in_w)
    gs = np.repeat(np.repeat(g, ratio, axis=1), ratio, axis=2) / float(ratio * ratio)
    dfeat = np.zeros((c, in_h, in_w))
    ci = np.arange(c)[:, None, None]
    for yi, wgt_y in ((ty0, wy0), (ty1, wy1)):
        for xi, wgt_x in ((tx0, wx0), (tx1, wx1)):
            np.add.at(dfeat, (ci, yi[None, :, None], xi[None, None, :]),
                      gs * (wgt_y[:, None] * wgt_x[None, :])[None])
    return dfeat
