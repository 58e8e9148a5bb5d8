"""numba-compiled twins of the kernels in ``_numpy``.

Loops accumulate into float64 locals; signatures and output dtypes match
the numpy path exactly so the two can be swapped behind the env flag.
"""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def im2col(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, c * kh * kw, ho * wo), dtype=xp.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for y in range(ho):
                        yy = y * stride + i
                        base = y * wo
                        for x in range(wo):
                            cols[b, row, base + x] = xp[b, ch, yy, x * stride + j]
    return cols


@njit(cache=True)
def col2im(cols, padded_shape, kh, kw, stride, ho, wo):
    n, c, hp, wp = padded_shape
    out = np.zeros((n, c, hp, wp), dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for y in range(ho):
                        yy = y * stride + i
                        base = y * wo
                        for x in range(wo):
                            out[b, ch, yy, x * stride + j] += cols[b, row, base + x]
    return out


@njit(cache=True)
def dw_conv(xp, w, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    out = np.empty((n, c, ho, wo), dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            for y in range(ho):
                for x in range(wo):
                    acc = 0.0
                    for i in range(kh):
                        for j in range(kw):
                            acc += w[ch, 0, i, j] * xp[b, ch, y * stride + i, x * stride + j]
                    out[b, ch, y, x] = acc
    return out


@njit(cache=True)
def dw_conv_grad(xp, w, g, stride):
    n, c = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = g.shape[2], g.shape[3]
    dxp = np.zeros(xp.shape, dtype=np.float64)
    dw = np.zeros(w.shape, dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    wij = w[ch, 0, i, j]
                    acc = 0.0
                    for y in range(ho):
                        yy = y * stride + i
                        for x in range(wo):
                            gv = g[b, ch, y, x]
                            xx = x * stride + j
                            dxp[b, ch, yy, xx] += wij * gv
                            acc += xp[b, ch, yy, xx] * gv
                    dw[ch, 0, i, j] += acc
    return dxp, dw


@njit(cache=True)
def _source_index(d, n_in, n_out):
    s = (d + 0.5) * (n_in / n_out) - 0.5
    if s < 0.0:
        s = 0.0
    if s > n_in - 1:
        s = n_in - 1.0
    i0 = int(math.floor(s))
    i1 = min(i0 + 1, n_in - 1)
    return i0, i1, s - i0


@njit(cache=True)
def bilinear(x, out_h, out_w):
    n, c, h, w = x.shape
    out = np.empty((n, c, out_h, out_w), dtype=np.float64)
    for oy in range(out_h):
        y0, y1, fy = _source_index(oy, h, out_h)
        for ox in range(out_w):
            x0, x1, fx = _source_index(ox, w, out_w)
            for b in range(n):
                for ch in range(c):
                    top = (1.0 - fx) * x[b, ch, y0, x0] + fx * x[b, ch, y0, x1]
                    bot = (1.0 - fx) * x[b, ch, y1, x0] + fx * x[b, ch, y1, x1]
                    out[b, ch, oy, ox] = (1.0 - fy) * top + fy * bot
    return out


@njit(cache=True)
def bilinear_grad(g, in_h, in_w):
    n, c, out_h, out_w = g.shape
    dx = np.zeros((n, c, in_h, in_w), dtype=np.float64)
    for oy in range(out_h):
        y0, y1, fy = _source_index(oy, in_h, out_h)
        for ox in range(out_w):
            x0, x1, fx = _source_index(ox, in_w, out_w)
            for b in range(n):
                for ch in range(c):
                    v = g[b, ch, oy, ox]
                    dx[b, ch, y0, x0] += (1.0 - fy) * (1.0 - fx) * v
                    dx[b, ch, y0, x1] += (1.0 - fy) * fx * v
                    dx[b, ch, y1, x0] += fy * (1.0 - fx) * v
                    dx[b, ch, y1, x1] += fy * fx * v
    return dx


@njit(cache=True)
def one_euro_run(x, t, min_cutoff, beta, d_cutoff, x_prev, dx_prev, t_prev, started):
    steps, chans = x.shape
    y = np.empty((steps, chans), dtype=np.float64)
    for k in range(steps):
        if not started[0]:
            for ch in range(chans):
                x_prev[ch] = x[k, ch]
                dx_prev[ch] = 0.0
                y[k, ch] = x[k, ch]
            t_prev[0] = t[k]
            started[0] = True
            continue
        dt = t[k] - t_prev[0]
        a_d = 1.0 / (1.0 + 1.0 / (2.0 * math.pi * d_cutoff * dt))
        for ch in range(chans):
            dx = (x[k, ch] - x_prev[ch]) / dt
            dx_hat = dx_prev[ch] + a_d * (dx - dx_prev[ch])
            cutoff = min_cutoff + beta * abs(dx_hat)
            a = 1.0 / (1.0 + 1.0 / (2.0 * math.pi * cutoff * dt))
            x_hat = x_prev[ch] + a * (x[k, ch] - x_prev[ch])
            x_prev[ch] = x_hat
            dx_prev[ch] = dx_hat
            y[k, ch] = x_hat
        t_prev[0] = t[k]
    return y


@njit(cache=True)
def adam_update(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    for i in range(p.shape[0]):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / c1) / (math.sqrt(vi / c2) + eps)
