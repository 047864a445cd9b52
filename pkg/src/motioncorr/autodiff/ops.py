"""Differentiable primitives.  Images are NCHW."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import ConfigError
from ..metrics import SsimParams, gaussian_filter_norm, ssim_terms
from .tensor import Tensor, as_tensor, make_result, record_branch


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(x, y):
    x = as_tensor(x)
    y = as_tensor(y, like=x)

    def backward(g):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return make_result(x.data + y.data, (x, y), backward, "add")


def mul(x, y):
    x = as_tensor(x)
    y = as_tensor(y, like=x)

    def backward(g):
        gx = _unbroadcast(g * y.data, x.shape) if x.requires_grad else None
        gy = _unbroadcast(g * x.data, y.shape) if y.requires_grad else None
        return gx, gy

    return make_result(x.data * y.data, (x, y), backward, "mul")


def reshape(x, shape):
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def relu(x):
    mask = x.data > 0
    record_branch(mask)
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    s = expit(x.data).astype(x.dtype)
    return make_result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def concat_channels(xs):
    xs = list(xs)
    sizes = np.cumsum([t.shape[1] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=1))

    return make_result(np.concatenate([t.data for t in xs], axis=1), xs, backward, "concat")


def dense(x, w, b=None):
    """``x @ w + b`` with ``x`` (N, Cin), ``w`` (Cin, Cout), ``b`` (Cout,)."""
    if x.shape[-1] != w.shape[0]:
        raise ConfigError("dense", f"input width {x.shape[-1]} does not match weight {w.shape}")
    out = x.data @ w.data
    parents = (x, w)
    if b is not None:
        out = out + b.data
        parents = (x, w, b)

    def backward(g):
        grads = [g @ w.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_result(out, parents, backward, "dense")


def global_avg_pool(x):
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return make_result(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def global_max_pool(x):
    """Per-channel spatial max; ties send the gradient to the lowest linear index."""
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    record_branch(idx)

    def backward(g):
        gx = np.zeros((n, c, h * w), dtype=x.dtype)
        np.put_along_axis(gx, idx[:, :, None], g[:, :, None], axis=2)
        return (gx.reshape(x.shape),)

    out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]
    return make_result(out, (x,), backward, "global_max_pool")


def channel_mean(x):
    c = x.shape[1]

    def backward(g):
        return (np.broadcast_to(g / c, x.shape).astype(x.dtype),)

    return make_result(x.data.mean(axis=1, keepdims=True), (x,), backward, "channel_mean")


def channel_max(x):
    """Max over channels, shape (N, 1, H, W); ties go to the lowest channel."""
    idx = x.data.argmax(axis=1)[:, None]
    record_branch(idx)

    def backward(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return make_result(np.take_along_axis(x.data, idx, axis=1), (x,), backward, "channel_max")


def avg_pool_2x2(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigError("avg_pool_2x2", f"spatial dims must be even, got {(h, w)}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3).astype(x.dtype),)

    return make_result(out, (x,), backward, "avg_pool_2x2")


def upsample_nearest_2x(x):
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward, "upsample_nearest_2x")


def conv2d(x, w, b=None):
    """Stride-1 convolution (cross-correlation) with zero "same" padding.

    ``w`` is (Cout, Cin, k, k) with odd ``k``.
    """
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin or kh != kw or kh % 2 == 0:
        raise ConfigError("conv2d", f"input {x.shape} incompatible with kernel {w.shape}")
    k, pad = kh, kh // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # (N, C, H, W, k, k) -> rows (N*H*W), cols (C*k*k)
    cols = sliding_window_view(xp, (k, k), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
    cols = cols.reshape(n * h * wd, cin * k * k)
    wmat = w.data.reshape(cout, cin * k * k)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, h, wd, cout).transpose(0, 3, 1, 2))
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * h * wd, cout)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, h, wd, cin, k, k)
            gxp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + h, j : j + wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd]
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_result(out, parents, backward, "conv2d")


class BatchNormStats:
    """Running mean/variance buffers for one batch-norm layer."""

    def __init__(self, channels, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def astype(self, dtype):
        out = BatchNormStats(len(self.mean), dtype)
        out.mean[:] = self.mean
        out.var[:] = self.var
        return out


BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def batch_norm_2d(x, gamma, beta, stats, mode="train"):
    """Per-channel normalization.

    In ``train`` mode batch statistics are used and ``stats`` is updated with
    ``running = 0.9 * running + 0.1 * batch``; in ``eval`` mode the running
    statistics are used.
    """
    n, c, h, w = x.shape
    shape = (1, c, 1, 1)
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ConfigError("batch_norm_2d", "train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        stats.mean[:] = BN_MOMENTUM * stats.mean + (1 - BN_MOMENTUM) * mean
        stats.var[:] = BN_MOMENTUM * stats.var + (1 - BN_MOMENTUM) * var
    elif mode == "eval":
        m = None
        mean, var = stats.mean.astype(x.dtype), stats.var.astype(x.dtype)
    else:
        raise ConfigError("mode", f"expected 'train' or 'eval', got {mode!r}")
    inv = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
    xhat = (x.data - mean.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(shape)
        if m is None:
            gx = gxhat * inv.reshape(shape)
        else:
            gx = (
                inv.reshape(shape)
                / m
                * (m * gxhat - gxhat.sum(axis=(0, 2, 3), keepdims=True) - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
            )
        return gx, gg, gb

    return make_result(out.astype(x.dtype), (x, gamma, beta), backward, "batch_norm_2d")


def ssim_loss(pred, target, p=None):
    """``1 - mean SSIM`` over all images and pixels of (N, 1, H, W) tensors.

    Computed in float64 whatever the input dtype; gradients flow to both
    arguments through every local moment of the windowed SSIM.
    """
    p = p or SsimParams()
    target = as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise ConfigError("ssim_loss", f"shapes differ: {pred.shape} vs {target.shape}")
    a = pred.data.astype(np.float64)
    b = target.data.astype(np.float64)
    g1 = p.kernel_1d()
    mu_a, mass = gaussian_filter_norm(a, g1)
    mu_b, _ = gaussian_filter_norm(b, g1)
    e_aa, _ = gaussian_filter_norm(a * a, g1)
    e_bb, _ = gaussian_filter_norm(b * b, g1)
    e_ab, _ = gaussian_filter_norm(a * b, g1)
    a1, a2, b1, b2 = ssim_terms(mu_a, mu_b, e_aa, e_bb, e_ab, p)
    smap = (a1 * a2) / (b1 * b2)
    loss = np.asarray(1.0 - smap.mean(), dtype=pred.dtype)

    def adjoint(y):
        # transpose of the renormalized filter: symmetric kernel, zero padding
        return gaussian_filter_norm(y / mass, g1)[0] * mass

    def backward(g):
        gs = float(g) * (-1.0 / smap.size)
        denom = b1 * b2
        ga1 = gs * a2 / denom
        ga2 = gs * a1 / denom
        gb1 = -gs * smap / b1
        gb2 = -gs * smap / b2
        g_mu_a = 2.0 * (mu_b * (ga1 - ga2) + mu_a * (gb1 - gb2))
        g_mu_b = 2.0 * (mu_a * (ga1 - ga2) + mu_b * (gb1 - gb2))
        f_sq = adjoint(gb2)
        f_ab = adjoint(2.0 * ga2)
        grad_a = adjoint(g_mu_a) + 2.0 * a * f_sq + b * f_ab
        grad_b = adjoint(g_mu_b) + 2.0 * b * f_sq + a * f_ab
        return grad_a.astype(pred.dtype), grad_b.astype(target.dtype)

    return make_result(loss, (pred, target), backward, "ssim_loss")


def mean(x):
    n = x.data.size
    return make_result(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.full(x.shape, g / n, dtype=x.dtype),),
        "mean",
    )


__all__ = [
    "Tensor",
    "add",
    "mul",
    "reshape",
    "relu",
    "sigmoid",
    "concat_channels",
    "dense",
    "global_avg_pool",
    "global_max_pool",
    "channel_mean",
    "channel_max",
    "avg_pool_2x2",
    "upsample_nearest_2x",
    "conv2d",
    "BatchNormStats",
    "batch_norm_2d",
    "ssim_loss",
    "mean",
]
