"""Numba @njit loop implementations of the hot kernels.

Semantics are identical to poserefine.kernels.numpy_backend; the loop
form trades vectorization for cache-friendly accumulation and no
temporaries. Compiled lazily on first call, with on-disk caching.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _padded(x, padding):
    cin, h, wd = x.shape
    if padding == 0:
        return x.copy()
    xp = np.zeros((cin, h + 2 * padding, wd + 2 * padding))
    xp[:, padding:padding + h, padding:padding + wd] = x
    return xp


@njit(cache=True)
def _im2col(xp, k, stride, out_h, out_w):
    """Patch matrix (cin*k*k, out_h*out_w) from a padded input."""
    cin = xp.shape[0]
    cols = np.empty((cin * k * k, out_h * out_w))
    row = 0
    for ci in range(cin):
        for ky in range(k):
            for kx in range(k):
                dst = cols[row]
                row += 1
                n = 0
                for oy in range(out_h):
                    xrow = xp[ci, oy * stride + ky]
                    if stride == 1:
                        for ox in range(out_w):
                            dst[n + ox] = xrow[ox + kx]
                    else:
                        for ox in range(out_w):
                            dst[n + ox] = xrow[ox * stride + kx]
                    n += out_w
    return cols


@njit(cache=True)
def conv2d_forward(x, w, b, stride, padding):
    cin, h, wd = x.shape
    cout = w.shape[0]
    k = w.shape[2]
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (wd + 2 * padding - k) // stride + 1
    cols = _im2col(_padded(x, padding), k, stride, out_h, out_w)
    wmat = np.ascontiguousarray(w).reshape(cout, cin * k * k)
    y = np.dot(wmat, cols)  # one dgemm carries the whole contraction
    for co in range(cout):
        yrow = y[co]
        bv = b[co]
        for n in range(yrow.size):
            yrow[n] += bv
    return y.reshape(cout, out_h, out_w)


@njit(cache=True)
def conv2d_input_grad(g, w, stride, padding, in_h, in_w):
    cout, out_h, out_w = g.shape
    cin = w.shape[1]
    k = w.shape[2]
    wmat = np.ascontiguousarray(w).reshape(cout, cin * k * k)
    wt = np.ascontiguousarray(wmat.T)
    gmat = np.ascontiguousarray(g).reshape(cout, out_h * out_w)
    dcols = np.dot(wt, gmat)  # (cin*k*k, out_h*out_w)
    dxp = np.zeros((cin, in_h + 2 * padding, in_w + 2 * padding))
    row = 0
    for ci in range(cin):
        for ky in range(k):
            for kx in range(k):
                src = dcols[row]
                row += 1
                n = 0
                for oy in range(out_h):
                    drow = dxp[ci, oy * stride + ky]
                    if stride == 1:
                        for ox in range(out_w):
                            drow[ox + kx] += src[n + ox]
                    else:
                        for ox in range(out_w):
                            drow[ox * stride + kx] += src[n + ox]
                    n += out_w
    return dxp[:, padding:padding + in_h, padding:padding + in_w].copy()


@njit(cache=True)
def conv2d_weight_grad(g, x, stride, padding, k):
    cout, out_h, out_w = g.shape
    cin = x.shape[0]
    n = out_h * out_w
    cols = _im2col(_padded(x, padding), k, stride, out_h, out_w)
    # transpose the small factor, not the patch matrix: dw.T = cols @ g.T
    gt = np.empty((n, cout))
    for co in range(cout):
        i = 0
        for oy in range(out_h):
            grow = g[co, oy]
            for ox in range(out_w):
                gt[i, co] = grow[ox]
                i += 1
    z = np.dot(cols, gt)  # (cin*k*k, cout)
    dw = np.empty((cout, cin, k, k))
    row = 0
    for ci in range(cin):
        for ky in range(k):
            for kx in range(k):
                for co in range(cout):
                    dw[co, ci, ky, kx] = z[row, co]
                row += 1
    return dw


@njit(cache=True)
def _src_coord(i, factor, n):
    s = (i + 0.5) / factor - 0.5
    if s < 0.0:
        s = 0.0
    if s > n - 1.0:
        s = n - 1.0
    return s


@njit(cache=True)
def upsample_forward(x, factor):
    c, h, w = x.shape
    out = np.empty((c, h * factor, w * factor))
    for oy in range(h * factor):
        sy = _src_coord(oy, factor, h)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, h - 1)
        wy = sy - y0
        for ox in range(w * factor):
            sx = _src_coord(ox, factor, w)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, w - 1)
            wx = sx - x0
            for ci in range(c):
                top = (1.0 - wx) * x[ci, y0, x0] + wx * x[ci, y0, x1]
                bot = (1.0 - wx) * x[ci, y1, x0] + wx * x[ci, y1, x1]
                out[ci, oy, ox] = (1.0 - wy) * top + wy * bot
    return out


@njit(cache=True)
def upsample_input_grad(g, factor, in_h, in_w):
    c = g.shape[0]
    dx = np.zeros((c, in_h, in_w))
    for oy in range(in_h * factor):
        sy = _src_coord(oy, factor, in_h)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, in_h - 1)
        wy = sy - y0
        for ox in range(in_w * factor):
            sx = _src_coord(ox, factor, in_w)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, in_w - 1)
            wx = sx - x0
            for ci in range(c):
                gv = g[ci, oy, ox]
                dx[ci, y0, x0] += gv * (1.0 - wy) * (1.0 - wx)
                dx[ci, y0, x1] += gv * (1.0 - wy) * wx
                dx[ci, y1, x0] += gv * wy * (1.0 - wx)
                dx[ci, y1, x1] += gv * wy * wx
    return dx


@njit(cache=True)
def roi_align_forward(feat, x1, y1, x2, y2, out_h, out_w, ratio):
    c, h, w = feat.shape
    bin_h = (y2 - y1) / out_h
    bin_w = (x2 - x1) / out_w
    step_h = bin_h / ratio
    step_w = bin_w / ratio
    inv = 1.0 / (ratio * ratio)
    out = np.zeros((c, out_h, out_w))
    for by in range(out_h):
        for bx in range(out_w):
            for iy in range(ratio):
                sy = y1 + (by * ratio + iy + 0.5) * step_h
                ylo = int(np.floor(sy))
                fy = sy - ylo
                yhi = ylo + 1
                vy0 = 0 <= ylo <= h - 1
                vy1 = 0 <= yhi <= h - 1
                cy0 = min(max(ylo, 0), h - 1)
                cy1 = min(max(yhi, 0), h - 1)
                wy0 = (1.0 - fy) if vy0 else 0.0
                wy1 = fy if vy1 else 0.0
                for ix in range(ratio):
                    sx = x1 + (bx * ratio + ix + 0.5) * step_w
                    xlo = int(np.floor(sx))
                    fx = sx - xlo
                    xhi = xlo + 1
                    vx0 = 0 <= xlo <= w - 1
                    vx1 = 0 <= xhi <= w - 1
                    cx0 = min(max(xlo, 0), w - 1)
                    cx1 = min(max(xhi, 0), w - 1)
                    wx0 = (1.0 - fx) if vx0 else 0.0
                    wx1 = fx if vx1 else 0.0
                    for ci in range(c):
                        v = wy0 * wx0 * feat[ci, cy0, cx0] \
                            + wy0 * wx1 * feat[ci, cy0, cx1] \
                            + wy1 * wx0 * feat[ci, cy1, cx0] \
                            + wy1 * wx1 * feat[ci, cy1, cx1]
                        out[ci, by, bx] += v * inv
    return out


@njit(cache=True)
def roi_align_input_grad(g, x1, y1, x2, y2, in_h, in_w, ratio):
    c, out_h, out_w = g.shape
    bin_h = (y2 - y1) / out_h
    bin_w = (x2 - x1) / out_w
    step_h = bin_h / ratio
    step_w = bin_w / ratio
    inv = 1.0 / (ratio * ratio)
    dfeat = np.zeros((c, in_h, in_w))
    for by in range(out_h):
        for bx in range(out_w):
            for iy in range(ratio):
                sy = y1 + (by * ratio + iy + 0.5) * step_h
                ylo = int(np.floor(sy))
                fy = sy - ylo
                yhi = ylo + 1
                vy0 = 0 <= ylo <= in_h - 1
                vy1 = 0 <= yhi <= in_h - 1
                cy0 = min(max(ylo, 0), in_h - 1)
                cy1 = min(max(yhi, 0), in_h - 1)
                wy0 = (1.0 - fy) if vy0 else 0.0
                wy1 = fy if vy1 else 0.0
                for ix in range(ratio):
                    sx = x1 + (bx * ratio + ix + 0.5) * step_w
                    xlo = int(np.floor(sx))
                    fx = sx - xlo
                    xhi = xlo + 1
                    vx0 = 0 <= xlo <= in_w - 1
                    vx1 = 0 <= xhi <= in_w - 1
                    cx0 = min(max(xlo, 0), in_w - 1)
                    cx1 = min(max(xhi, 0), in_w - 1)
                    wx0 = (1.0 - fx) if vx0 else 0.0
                    wx1 = fx if vx1 else 0.0
                    for ci in range(c):
                        gv = g[ci, by, bx] * inv
                        dfeat[ci, cy0, cx0] += gv * wy0 * wx0
                        dfeat[ci, cy0, cx1] += gv * wy0 * wx1
                        dfeat[ci, cy1, cx0] += gv * wy1 * wx0
                        dfeat[ci, cy1, cx1] += gv * wy1 * wx1
    return dfeat
