"""Dense NCHW tensor primitives with an optional reverse-mode tape.

Tensors are plain numpy arrays (float32 for inference, float64 for
training). Every op accepts ``tape=``; when given, the op records a node
whose backward closure produces gradients for its inputs. Reductions
accumulate in float64 and cast back to the input precision.
"""
import math

import numpy as np

from . import kernels

PADDINGS = ("same", "valid")
ACTIVATIONS = ("relu", "relu6", "linear")
BN_EPSILON = 1e-3


class TapeError(RuntimeError):
    pass


class Tape:
    """Execution-order record of differentiable ops for one training step."""

    def __init__(self):
        self.nodes = []
        self.params = {}
        self._tracked = set()
        self._keep = []
        self.replayed = False

    def watch(self, name, array):
        if array.dtype != np.float64:
            raise TapeError(f"parameter {name!r} must be float64 to be recorded, got {array.dtype}")
        if name in self.params and self.params[name] is not array:
            raise TapeError(f"parameter name {name!r} already watched with a different array")
        self.params[name] = array
        self._tracked.add(id(array))
        self._keep.append(array)
        return array

    def tracks(self, array):
        return id(array) in self._tracked

    def record(self, out, inputs, grad_fn):
        for a in inputs:
            if a.dtype != np.float64:
                raise TapeError(f"tape requires double precision inputs, got {a.dtype}")
        needs = tuple(self.tracks(a) for a in inputs)
        if not any(needs):
            return out
        self.nodes.append((out, tuple(inputs), needs, grad_fn))
        self._tracked.add(id(out))
        self._keep.append(out)
        return out


def _record(tape, out, inputs, grad_fn):
    if tape is None:
        return out
    return tape.record(out, inputs, grad_fn)


def backward(tape, loss, loss_gradient=None):
    """Replay ``tape`` in reverse from ``loss``; returns {param name: gradient}."""
    if tape.replayed:
        raise TapeError("tape has already been replayed; record a new one")
    tape.replayed = True
    if loss_gradient is None:
        loss_gradient = np.ones_like(loss, dtype=np.float64)
    loss_gradient = np.asarray(loss_gradient, dtype=np.float64)
    if loss_gradient.shape != np.shape(loss):
        raise ValueError(f"loss gradient shape {loss_gradient.shape} != loss shape {np.shape(loss)}")
    grads = {id(loss): loss_gradient}
    for out, inputs, needs, grad_fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for a, need, ga in zip(inputs, needs, grad_fn(g, needs)):
            if not need or ga is None:
                continue
            key = id(a)
            if key in grads:
                grads[key] = grads[key] + ga
            else:
                grads[key] = ga
    return {
        name: grads.get(id(arr), np.zeros_like(arr)) for name, arr in tape.params.items()
    }


def _check4(name, x):
    if x.ndim != 4:
        raise ValueError(f"{name}: expected an order-4 NCHW tensor, got shape {x.shape}")


def _to64(a):
    return a.astype(np.float64, copy=False)


def _gemm_batched(m, x):
    """m @ x[n] for every n, as one GEMM over the folded batch axis."""
    if x.shape[0] == 1:
        return (m @ x[0])[None]
    n, c, k = x.shape
    x2 = x.transpose(1, 0, 2).reshape(c, n * k)
    return (m @ x2).reshape(m.shape[0], n, k).transpose(1, 0, 2)


def _batched_outer(a, b):
    """sum_n a[n] @ b[n].T for (n, p, k) and (n, q, k) operands."""
    if a.shape[0] == 1:
        return _to64(a[0]) @ _to64(b[0]).T
    n, p, k = a.shape
    a2 = _to64(a).transpose(1, 0, 2).reshape(p, n * k)
    b2 = _to64(b).transpose(1, 0, 2).reshape(b.shape[1], n * k)
    return a2 @ b2.T


def pad_amounts(n, k, stride, padding):
    """(out_extent, pad_before, pad_after) for one spatial axis."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding == "same":
        out = -(-n // stride)
        total = max((out - 1) * stride + k - n, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        if n < k:
            raise ValueError(f"valid convolution needs extent >= kernel, got {n} < {k}")
        return (n - k) // stride + 1, 0, 0
    raise ValueError(f"padding must be one of {PADDINGS}, got {padding!r}")


def _pad(x, ph, pw):
    if ph == (0, 0) and pw == (0, 0):
        return x
    return np.pad(x, ((0, 0), (0, 0), ph, pw))


def conv2d(x, kernel, bias=None, stride=1, padding="same", tape=None):
    """Dense 2-D convolution; kernel is (out_ch, in_ch, kh, kw)."""
    _check4("conv2d input", x)
    _check4("conv2d kernel", kernel)
    if kernel.shape[1] != x.shape[1]:
        raise ValueError(
            f"conv2d: kernel shape {kernel.shape} does not match input shape {x.shape} (channel extent)"
        )
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    ho, pt, pb = pad_amounts(h, kh, stride, padding)
    wo, pl, pr = pad_amounts(w, kw, stride, padding)
    xp = _pad(x, (pt, pb), (pl, pr))
    if kh == 1 and kw == 1 and stride == 1:
        cols = xp.reshape(n, c, h * w)
    else:
        cols = kernels.im2col(xp, kh, kw, stride, ho, wo)
    wmat = kernel.reshape(o, -1)
    out = _gemm_batched(_to64(wmat), _to64(cols))
    if bias is not None:
        out += _to64(bias)[None, :, None]
    out = out.reshape(n, o, ho, wo).astype(x.dtype, copy=False)

    inputs = [x, kernel] + ([bias] if bias is not None else [])

    def grad_fn(g, needs):
        g2 = g.reshape(n, o, ho * wo)
        gx = gw = gb = None
        if needs[0]:
            gcols = _gemm_batched(wmat.T, g2)
            if kh == 1 and kw == 1 and stride == 1:
                gx = gcols.reshape(n, c, h, w)
            else:
                gxp = kernels.col2im(gcols, xp.shape, kh, kw, stride, ho, wo)
                gx = gxp[:, :, pt : pt + h, pl : pl + w]
        if needs[1]:
            gw = _batched_outer(g2, cols).reshape(kernel.shape)
        if bias is not None and needs[2]:
            gb = g2.sum(axis=(0, 2))
        return gx, gw, gb

    return _record(tape, out, inputs, grad_fn)


def pointwise_conv2d(x, kernel, bias=None, tape=None):
    """1x1 convolution, i.e. a per-pixel linear map across channels."""
    if kernel.ndim != 4 or kernel.shape[2:] != (1, 1):
        raise ValueError(f"pointwise_conv2d needs a (out, in, 1, 1) kernel, got {kernel.shape}")
    return conv2d(x, kernel, bias, 1, "same", tape=tape)


def depthwise_conv2d(x, kernel, bias=None, stride=1, padding="same", tape=None):
    """One (1, kh, kw) filter per input channel; kernel is (C, 1, kh, kw)."""
    _check4("depthwise_conv2d input", x)
    _check4("depthwise_conv2d kernel", kernel)
    if kernel.shape[0] != x.shape[1] or kernel.shape[1] != 1:
        raise ValueError(
            f"depthwise_conv2d: kernel shape {kernel.shape} needs one filter per channel of input {x.shape}"
        )
    n, c, h, w = x.shape
    kh, kw = kernel.shape[2:]
    ho, pt, pb = pad_amounts(h, kh, stride, padding)
    wo, pl, pr = pad_amounts(w, kw, stride, padding)
    xp = _pad(x, (pt, pb), (pl, pr))
    out = kernels.dw_conv(xp, kernel, stride, ho, wo)
    if bias is not None:
        out += _to64(bias)[None, :, None, None]
    out = out.astype(x.dtype, copy=False)
    inputs = [x, kernel] + ([bias] if bias is not None else [])

    def grad_fn(g, needs):
        gxp, gw = kernels.dw_conv_grad(xp, kernel, np.ascontiguousarray(g), stride)
        gx = gxp[:, :, pt : pt + h, pl : pl + w]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    return _record(tape, out, inputs, grad_fn)


def transposed_conv2d(x, kernel, stride=1, padding="same", output_size=None, tape=None):
    """Adjoint of :func:`conv2d` with the same kernel, stride and padding.

    The kernel is laid out (in_ch, out_ch, kh, kw) from this op's point of
    view, which is the conv2d kernel it is the adjoint of. With "same"
    padding the output extent defaults to ``in * stride``; with "valid" to
    ``(in - 1) * stride + k``. ``output_size`` picks among the extents that
    map onto the same input when the stride does not divide evenly.
    """
    _check4("transposed_conv2d input", x)
    _check4("transposed_conv2d kernel", kernel)
    if kernel.shape[0] != x.shape[1]:
        raise ValueError(
            f"transposed_conv2d: kernel shape {kernel.shape} does not match input shape {x.shape}"
        )
    n, ci, hi, wi = x.shape
    _, co, kh, kw = kernel.shape
    if output_size is None:
        if padding == "same":
            output_size = (hi * stride, wi * stride)
        else:
            output_size = ((hi - 1) * stride + kh, (wi - 1) * stride + kw)
    ho, wo = output_size
    h_chk, pt, pb = pad_amounts(ho, kh, stride, padding)
    w_chk, pl, pr = pad_amounts(wo, kw, stride, padding)
    if (h_chk, w_chk) != (hi, wi):
        raise ValueError(
            f"transposed_conv2d: output size {output_size} does not map back onto input {x.shape}"
        )
    padded_shape = (n, co, ho + pt + pb, wo + pl + pr)
    wmat = kernel.reshape(ci, co * kh * kw)
    cols = _gemm_batched(_to64(wmat).T, _to64(x).reshape(n, ci, hi * wi))
    outp = kernels.col2im(cols, padded_shape, kh, kw, stride, hi, wi)
    out = np.ascontiguousarray(outp[:, :, pt : pt + ho, pl : pl + wo]).astype(x.dtype, copy=False)

    def grad_fn(g, needs):
        gp = _pad(g, (pt, pb), (pl, pr))
        gcols = kernels.im2col(gp, kh, kw, stride, hi, wi)
        gx = gw = None
        if needs[0]:
            gx = _gemm_batched(wmat, gcols).reshape(n, ci, hi, wi)
        if needs[1]:
            gw = _batched_outer(x.reshape(n, ci, hi * wi), gcols).reshape(kernel.shape)
        return gx, gw

    return _record(tape, out, [x, kernel], grad_fn)


def bilinear_resize(x, out_h, out_w, tape=None):
    """Bilinear resampling with half-pixel centers and edge clamping."""
    _check4("bilinear_resize input", x)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output extents must be >= 1, got {(out_h, out_w)}")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        out = x.copy()
    else:
        out = kernels.bilinear(x, out_h, out_w).astype(x.dtype, copy=False)

    def grad_fn(g, needs):
        if (out_h, out_w) == (h, w):
            return (g,)
        return (kernels.bilinear_grad(np.ascontiguousarray(g), h, w),)

    return _record(tape, out, [x], grad_fn)


def batchnorm(x, mean, var, gamma, beta, epsilon=BN_EPSILON, tape=None):
    """Inference-form batch normalization with fixed statistics."""
    _check4("batchnorm input", x)
    c = x.shape[1]
    for name, v in (("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)):
        if v.shape != (c,):
            raise ValueError(f"batchnorm: {name} has shape {v.shape}, expected ({c},)")
    denom = _to64(var) + epsilon
    if np.any(denom <= 0):
        raise ValueError("batchnorm: var + epsilon must be positive")
    inv = 1.0 / np.sqrt(denom)
    scale = _to64(gamma) * inv
    shift = _to64(beta) - _to64(mean) * scale
    out = (_to64(x) * scale[None, :, None, None] + shift[None, :, None, None]).astype(x.dtype, copy=False)

    def grad_fn(g, needs):
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        return (
            g * scale[None, :, None, None],
            None,
            None,
            np.einsum("nchw,nchw->c", g, xhat),
            g.sum(axis=(0, 2, 3)),
        )

    return _record(tape, out, [x, mean, var, gamma, beta], grad_fn)


def _channel_sum(a3):
    return a3.sum(axis=2).sum(axis=0)


def batchnorm_train(x, gamma, beta, epsilon=BN_EPSILON, tape=None):
    """Batch-statistics normalization; returns (out, batch_mean, batch_var)."""
    _check4("batchnorm input", x)
    n, c, h, w = x.shape
    m = n * h * w
    x3 = _to64(x).reshape(n, c, h * w)
    mean = _channel_sum(x3) / m
    xc = x3 - mean[:, None]
    var = _channel_sum(xc * xc) / m
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = xc * inv[:, None]
    out = (xhat * _to64(gamma)[:, None] + _to64(beta)[:, None]).reshape(x.shape).astype(x.dtype, copy=False)

    def grad_fn(g, needs):
        g3 = g.reshape(n, c, h * w)
        gsum = _channel_sum(g3)
        gxhat_sum = _channel_sum(g3 * xhat)
        gx = None
        if needs[0]:
            k = (gamma * inv)[:, None]
            gx = (k * (g3 - (gsum / m)[:, None] - xhat * (gxhat_sum / m)[:, None])).reshape(x.shape)
        return gx, gxhat_sum, gsum

    return _record(tape, out, [x, gamma, beta], grad_fn), mean, var


def activation(x, kind, tape=None):
    if kind == "linear":
        return x
    if kind == "relu":
        out = np.maximum(x, 0)
        mask = x > 0
    elif kind == "relu6":
        out = np.clip(x, 0, 6)
        mask = (x > 0) & (x < 6)
    else:
        raise ValueError(f"activation must be one of {ACTIVATIONS}, got {kind!r}")

    def grad_fn(g, needs):
        return (g * mask,)

    return _record(tape, out, [x], grad_fn)


def concat(inputs, axis=1, tape=None):
    """Channel concatenation; all other extents must agree."""
    inputs = list(inputs)
    if len(inputs) == 1:
        return inputs[0]
    ref = inputs[0].shape
    for a in inputs[1:]:
        if a.ndim != len(ref) or any(a.shape[d] != ref[d] for d in range(len(ref)) if d != axis):
            raise ValueError(f"concat: shape {a.shape} incompatible with {ref} along axis {axis}")
    out = np.concatenate(inputs, axis=axis)
    bounds = np.cumsum([0] + [a.shape[axis] for a in inputs])

    def grad_fn(g, needs):
        return [
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) if needs[i] else None
            for i in range(len(inputs))
        ]

    return _record(tape, out, inputs, grad_fn)


def channel_slice(x, start, stop, tape=None):
    out = np.ascontiguousarray(x[:, start:stop])

    def grad_fn(g, needs):
        gx = np.zeros(x.shape, dtype=np.float64)
        gx[:, start:stop] = g
        return (gx,)

    return _record(tape, out, [x], grad_fn)


def add(a, b, tape=None):
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = a + b
    return _record(tape, out, [a, b], lambda g, needs: (g, g))


def absolute(x, tape=None):
    out = np.abs(x)
    return _record(tape, out, [x], lambda g, needs: (g * np.sign(x),))


def scale(x, factor, tape=None):
    out = x * factor
    return _record(tape, out, [x], lambda g, needs: (g * factor,))


def tensor_sum(x, tape=None):
    out = np.asarray(_to64(x).sum())
    return _record(tape, out, [x], lambda g, needs: (np.full(x.shape, float(g)),))


def fold_batchnorm(kernel, bias, mean, var, gamma, beta, epsilon=BN_EPSILON):
    """Merge a following batchnorm into a conv kernel/bias; returns (kernel, bias)."""
    s = _to64(gamma) / np.sqrt(_to64(var) + epsilon)
    k = _to64(kernel) * s[:, None, None, None]
    b = np.zeros_like(s) if bias is None else _to64(bias)
    b = (b - _to64(mean)) * s + _to64(beta)
    return k.astype(kernel.dtype), b.astype(kernel.dtype)


def numel(shape):
    return int(math.prod(shape))
