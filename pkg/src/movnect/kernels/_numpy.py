"""Pure-numpy reference path for the hot kernels.

Every function here has a twin with the same signature in ``_numba``.
Inputs are already padded where padding applies; outputs of reductions
are float64 regardless of the input precision.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (n, c, ho, wo, kh, kw) -> (n, c, kh, kw, ho, wo)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im(cols, padded_shape, kh, kw, stride, ho, wo):
    n, c, hp, wp = padded_shape
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


def dw_conv(xp, w, stride, ho, wo):
    n, c = xp.shape[:2]
    kh, kw = w.shape[2:]
    out = np.zeros((n, c, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            tap = w[:, 0, i, j].astype(np.float64)[None, :, None, None]
            out += tap * xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return out


def dw_conv_grad(xp, w, g, stride):
    """Gradients of the depthwise conv w.r.t. the padded input and the kernel."""
    kh, kw = w.shape[2:]
    ho, wo = g.shape[2:]
    dxp = np.zeros(xp.shape, dtype=np.float64)
    dw = np.zeros(w.shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
            dxp[sl] += w[:, 0, i, j][None, :, None, None] * g
            dw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[sl])
    return dxp, dw


def _interp_matrix(n_in, n_out):
    s = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    s = np.clip(s, 0.0, n_in - 1)
    i0 = np.floor(s).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = s - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear(x, out_h, out_w):
    ry = _interp_matrix(x.shape[2], out_h)
    rx = _interp_matrix(x.shape[3], out_w)
    return np.einsum("oh,nchw,pw->ncop", ry, x.astype(np.float64), rx, optimize=True)


def bilinear_grad(g, in_h, in_w):
    ry = _interp_matrix(in_h, g.shape[2])
    rx = _interp_matrix(in_w, g.shape[3])
    return np.einsum("oh,ncop,pw->nchw", ry, g, rx, optimize=True)


def one_euro_run(x, t, min_cutoff, beta, d_cutoff, x_prev, dx_prev, t_prev, started):
    """Filter a (T, C) block of samples; state arrays are updated in place."""
    y = np.empty(x.shape, dtype=np.float64)
    for k in range(x.shape[0]):
        if not started[0]:
            x_prev[:] = x[k]
            dx_prev[:] = 0.0
            t_prev[0] = t[k]
            started[0] = True
            y[k] = x[k]
            continue
        dt = t[k] - t_prev[0]
        a_d = 1.0 / (1.0 + 1.0 / (2.0 * np.pi * d_cutoff * dt))
        dx = (x[k] - x_prev) / dt
        dx_hat = dx_prev + a_d * (dx - dx_prev)
        cutoff = min_cutoff + beta * np.abs(dx_hat)
        a = 1.0 / (1.0 + 1.0 / (2.0 * np.pi * cutoff * dt))
        x_hat = x_prev + a * (x[k] - x_prev)
        x_prev[:] = x_hat
        dx_prev[:] = dx_hat
        t_prev[0] = t[k]
        y[k] = x_hat
    return y


def adam_update(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    """In-place Adam step on flat float64 arrays; c1, c2 are bias corrections."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
