"""Brute-force references written straight from the definitions.

Nothing here imports the package's kernels; loops are plain Python over
float64 so they can serve as independent oracles.
"""
import math

import numpy as np


def same_pads(n, k, s):
    out = math.ceil(n / s)
    total = max((out - 1) * s + k - n, 0)
    return out, total // 2


def conv2d(x, k, b=None, stride=1, padding="same"):
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    if padding == "same":
        ho, pt = same_pads(h, kh, stride)
        wo, pl = same_pads(w, kw, stride)
    else:
        ho, wo, pt, pl = (h - kh) // stride + 1, (w - kw) // stride + 1, 0, 0
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else float(b[oc])
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                r, q = y * stride + i - pt, xx * stride + j - pl
                                if 0 <= r < h and 0 <= q < w:
                                    acc += float(k[oc, ic, i, j]) * float(x[bi, ic, r, q])
                    out[bi, oc, y, xx] = acc
    return out


def depthwise_conv2d(x, k, b=None, stride=1, padding="same"):
    n, c, h, w = x.shape
    _, _, kh, kw = k.shape
    if padding == "same":
        ho, pt = same_pads(h, kh, stride)
        wo, pl = same_pads(w, kw, stride)
    else:
        ho, wo, pt, pl = (h - kh) // stride + 1, (w - kw) // stride + 1, 0, 0
    out = np.zeros((n, c, ho, wo))
    for bi in range(n):
        for ch in range(c):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else float(b[ch])
                    for i in range(kh):
                        for j in range(kw):
                            r, q = y * stride + i - pt, xx * stride + j - pl
                            if 0 <= r < h and 0 <= q < w:
                                acc += float(k[ch, 0, i, j]) * float(x[bi, ch, r, q])
                    out[bi, ch, y, xx] = acc
    return out


def transposed_conv2d(x, k, stride, out_size):
    """Scatter form: every input pixel spreads its kernel-weighted value."""
    n, ci, hi, wi = x.shape
    _, co, kh, kw = k.shape
    ho, wo = out_size
    _, pt = same_pads(ho, kh, stride)
    _, pl = same_pads(wo, kw, stride)
    out = np.zeros((n, co, ho, wo))
    for bi in range(n):
        for ic in range(ci):
            for y in range(hi):
                for xx in range(wi):
                    v = float(x[bi, ic, y, xx])
                    for oc in range(co):
                        for i in range(kh):
                            for j in range(kw):
                                r, q = y * stride + i - pt, xx * stride + j - pl
                                if 0 <= r < ho and 0 <= q < wo:
                                    out[bi, oc, r, q] += v * float(k[ic, oc, i, j])
    return out


def bilinear(x, oh, ow):
    n, c, h, w = x.shape
    out = np.zeros((n, c, oh, ow))

    def src(d, n_in, n_out):
        s = (d + 0.5) * n_in / n_out - 0.5
        s = min(max(s, 0.0), n_in - 1.0)
        i0 = int(math.floor(s))
        return i0, min(i0 + 1, n_in - 1), s - i0

    for bi in range(n):
        for ch in range(c):
            for y in range(oh):
                y0, y1, fy = src(y, h, oh)
                for xx in range(ow):
                    x0, x1, fx = src(xx, w, ow)
                    out[bi, ch, y, xx] = (
                        (1 - fy) * (1 - fx) * x[bi, ch, y0, x0]
                        + (1 - fy) * fx * x[bi, ch, y0, x1]
                        + fy * (1 - fx) * x[bi, ch, y1, x0]
                        + fy * fx * x[bi, ch, y1, x1]
                    )
    return out


def batchnorm(x, mean, var, gamma, beta, eps=1e-3):
    out = np.zeros(x.shape)
    n, c, h, w = x.shape
    for bi in range(n):
        for ch in range(c):
            for y in range(h):
                for xx in range(w):
                    out[bi, ch, y, xx] = (x[bi, ch, y, xx] - mean[ch]) / math.sqrt(var[ch] + eps) * gamma[ch] + beta[ch]
    return out


def activation(x, kind):
    flat = [float(v) for v in x.reshape(-1)]
    if kind == "relu":
        res = [v if v > 0 else 0.0 for v in flat]
    elif kind == "relu6":
        res = [min(max(v, 0.0), 6.0) for v in flat]
    else:
        res = flat
    return np.array(res).reshape(x.shape)


def concat(parts):
    n, _, h, w = parts[0].shape
    out = np.zeros((n, sum(p.shape[1] for p in parts), h, w))
    c0 = 0
    for p in parts:
        for ch in range(p.shape[1]):
            out[:, c0 + ch] = p[:, ch]
        c0 += p.shape[1]
    return out


def one_euro(xs, ts, min_cutoff=1.0, beta=0.007, d_cutoff=1.0):
    """Scalar filter straight from its definition (tau = 1 / (2 pi fc))."""
    def alpha(fc, dt):
        tau = 1.0 / (2 * math.pi * fc)
        return 1.0 / (1.0 + tau / dt)

    out = []
    x_prev = dx_prev = t_prev = None
    for x, t in zip(xs, ts):
        if x_prev is None:
            x_prev, dx_prev, t_prev = x, 0.0, t
            out.append(x)
            continue
        dt = t - t_prev
        dx = (x - x_prev) / dt
        dx_hat = dx_prev + alpha(d_cutoff, dt) * (dx - dx_prev)
        fc = min_cutoff + beta * abs(dx_hat)
        x_hat = x_prev + alpha(fc, dt) * (x - x_prev)
        out.append(x_hat)
        x_prev, dx_prev, t_prev = x_hat, dx_hat, t
    return np.array(out)


def heatmap_loss(H, G, Tm, alpha):
    J = H.shape[0]
    total = 0.0
    for j in range(J):
        total += alpha * math.sqrt(float(np.sum((H[j] - G[j]) ** 2)))
        total += (1 - alpha) * math.sqrt(float(np.sum((H[j] - Tm[j]) ** 2)))
    return total / J


def locmap_loss(L, G, Tm, M, alpha):
    total = 0.0
    for f in range(3):
        for j in range(L.shape[1]):
            total += alpha * math.sqrt(float(np.sum((M[j] * (L[f, j] - G[f, j])) ** 2)))
            total += (1 - alpha) * math.sqrt(float(np.sum((M[j] * (L[f, j] - Tm[f, j])) ** 2)))
    return total


def mpjpe(pred, gt):
    total = 0.0
    for p, g in zip(pred, gt):
        total += math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(p, g)))
    return total / len(pred)


# ---------------------------------------------------------------- random cases


def conv_case(rng):
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 4))
    o = int(rng.integers(1, 4))
    k = int(rng.choice([1, 2, 3, 4]))
    s = int(rng.choice([1, 2]))
    h = int(rng.integers(max(k, 1), 8))
    w = int(rng.integers(max(k, 1), 8))
    pad = str(rng.choice(["same", "valid"]))
    x = rng.normal(size=(n, c, h, w))
    kern = rng.normal(size=(o, c, k, k))
    b = rng.normal(size=o) if rng.random() < 0.5 else None
    return x, kern, b, s, pad


def depthwise_case(rng):
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 5))
    k = int(rng.choice([1, 3, 5]))
    s = int(rng.choice([1, 2]))
    h = int(rng.integers(k, 9))
    w = int(rng.integers(k, 9))
    pad = str(rng.choice(["same", "valid"]))
    x = rng.normal(size=(n, c, h, w))
    kern = rng.normal(size=(c, 1, k, k))
    b = rng.normal(size=c) if rng.random() < 0.5 else None
    return x, kern, b, s, pad


def transposed_case(rng):
    n = int(rng.integers(1, 3))
    ci = int(rng.integers(1, 4))
    co = int(rng.integers(1, 4))
    k = int(rng.choice([2, 3, 4]))
    s = int(rng.choice([1, 2]))
    hi = int(rng.integers(1, 5))
    wi = int(rng.integers(1, 5))
    x = rng.normal(size=(n, ci, hi, wi))
    kern = rng.normal(size=(ci, co, k, k))
    return x, kern, s, (hi * s, wi * s)


def bilinear_case(rng):
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 4))
    h, w = (int(v) for v in rng.integers(1, 7, size=2))
    oh, ow = (int(v) for v in rng.integers(1, 13, size=2))
    return rng.normal(size=(n, c, h, w)), oh, ow


def batchnorm_case(rng):
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 5))
    h, w = (int(v) for v in rng.integers(1, 6, size=2))
    return (
        rng.normal(size=(n, c, h, w)),
        rng.normal(size=c),
        rng.uniform(0.1, 3.0, size=c),
        rng.normal(size=c),
        rng.normal(size=c),
    )
