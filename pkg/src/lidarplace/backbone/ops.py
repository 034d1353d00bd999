"""Tensor primitives (NCHW) with their reverse-mode counterparts.

All functions are dtype-generic: they compute in whatever floating dtype the
inputs carry, which lets gradient checks run in float64 while training runs
in float32.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import ShapeMismatch

ACTIVATIONS = ("relu", "relu6", "hard_swish")


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _pad(x, p, value=0):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def windows(xp, k, stride, ho, wo):
    """Strided view (N, C, Ho, Wo, k, k) of a padded input; no copy."""
    sn, sc, sh, sw = xp.strides
    n, c = xp.shape[:2]
    return as_strided(xp, (n, c, ho, wo, k, k), (sn, sc, sh * stride, sw * stride, sh, sw),
                      writeable=False)


def im2col(x, k, stride, padding, pad_value=0):
    """Patch matrix of shape (N*Ho*Wo, C*k*k); column order is (c, ky, kx)."""
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, k, stride, padding), conv_out_size(w, k, stride, padding)
    win = windows(_pad(x, padding, pad_value), k, stride, ho, wo)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _check_conv(x, w, groups):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    c = x.shape[1]
    o, cg, kh, kw = w.shape
    if kh != kw:
        raise ShapeMismatch(f"square kernels only, got {kh}x{kw}")
    if c % groups or o % groups or c // groups != cg:
        raise ShapeMismatch(
            f"input channels {c}, weight {w.shape} incompatible with groups={groups}")


def _is_depthwise(x, w, groups):
    return groups > 1 and groups == x.shape[1] == w.shape[0] and w.shape[1] == 1


def conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """Grouped 2-d cross-correlation.

    Depthwise convolutions use a shifted multiply-accumulate loop over the
    kernel taps; everything else is lowered to a patch matrix product.
    """
    _check_conv(x, w, groups)
    n, c, h, wd = x.shape
    o, cg, k, _ = w.shape
    ho, wo = conv_out_size(h, k, stride, padding), conv_out_size(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"kernel {k} larger than padded input {h}x{wd} (padding {padding})")

    if _is_depthwise(x, w, groups):
        xp = _pad(x, padding)
        out = np.zeros((n, c, ho, wo), dtype=np.result_type(x, w))
        span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for ky in range(k):
            for kx in range(k):
                tap = w[:, 0, ky, kx][None, :, None, None]
                out += xp[:, :, ky:ky + span_h:stride, kx:kx + span_w:stride] * tap
    elif k == 1 and padding == 0 and groups == 1:
        xs = x[:, :, ::stride, ::stride] if stride > 1 else x
        flat = xs.transpose(0, 2, 3, 1).reshape(-1, c)
        out = (flat @ w.reshape(o, c).T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    else:
        og = o // groups
        out = np.empty((n, o, ho, wo), dtype=np.result_type(x, w))
        for g in range(groups):
            xg = x[:, g * cg:(g + 1) * cg]
            cols, _, _ = im2col(xg, k, stride, padding)
            wg = w[g * og:(g + 1) * og].reshape(og, cg * k * k)
            out[:, g * og:(g + 1) * og] = (cols @ wg.T).reshape(n, ho, wo, og).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(dout, x, w, stride=1, padding=0, groups=1, need_dx=True, has_bias=True):
    """Returns (dx, dw, db); dx is None when not requested."""
    n, c, h, wd = x.shape
    o, cg, k, _ = w.shape
    _, _, ho, wo = dout.shape
    db = dout.sum(axis=(0, 2, 3)) if has_bias else None
    dx = None

    if _is_depthwise(x, w, groups):
        xp = _pad(x, padding)
        span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        dw = np.empty_like(w)
        dxp = np.zeros_like(xp) if need_dx else None
        for ky in range(k):
            for kx in range(k):
                sl = (slice(None), slice(None), slice(ky, ky + span_h, stride),
                      slice(kx, kx + span_w, stride))
                dw[:, 0, ky, kx] = np.einsum("nchw,nchw->c", dout, xp[sl])
                if need_dx:
                    dxp[sl] += dout * w[:, 0, ky, kx][None, :, None, None]
        if need_dx:
            dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        return dx, dw, db

    if k == 1 and padding == 0 and groups == 1:
        xs = x[:, :, ::stride, ::stride] if stride > 1 else x
        flat = xs.transpose(0, 2, 3, 1).reshape(-1, c)
        dflat = dout.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (dflat.T @ flat).reshape(w.shape)
        if need_dx:
            dxs = (dflat @ w.reshape(o, c)).reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
            if stride > 1:
                dx = np.zeros_like(x)
                dx[:, :, ::stride, ::stride] = dxs
            else:
                dx = np.ascontiguousarray(dxs)
        return dx, dw, db

    og = o // groups
    dw = np.empty_like(w)
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=x.dtype) if need_dx else None
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for g in range(groups):
        cols, _, _ = im2col(x[:, g * cg:(g + 1) * cg], k, stride, padding)
        dg = dout[:, g * og:(g + 1) * og].transpose(0, 2, 3, 1).reshape(-1, og)
        wg = w[g * og:(g + 1) * og].reshape(og, cg * k * k)
        dw[g * og:(g + 1) * og] = (dg.T @ cols).reshape(og, cg, k, k)
        if need_dx:
            dcols = (dg @ wg).reshape(n, ho, wo, cg, k, k)
            for ky in range(k):
                for kx in range(k):
                    dxp[:, g * cg:(g + 1) * cg, ky:ky + span_h:stride, kx:kx + span_w:stride] += \
                        dcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    if need_dx:
        dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
    return dx, dw, db


# -- batch norm ---------------------------------------------------------------

def batchnorm(x, gamma, beta, mean, var, eps):
    inv = 1.0 / np.sqrt(var + eps)
    scale = (gamma * inv).astype(x.dtype)
    shift = (beta - mean * gamma * inv).astype(x.dtype)
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def batchnorm_train(x, gamma, beta, eps):
    """Batch-statistics normalization. Returns (y, cache, batch_mean, batch_var)."""
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
    y = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return y, (xhat, inv), mu, var


def batchnorm_train_backward(dy, cache, gamma):
    xhat, inv = cache
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dbeta = dy.sum(axis=(0, 2, 3))
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    dx = (inv[None, :, None, None] / m) * (
        m * dxhat - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
    return dx, dgamma, dbeta


def batchnorm_eval_backward(dy, x, gamma, mean, var, eps):
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dx = dy * (gamma * inv)[None, :, None, None]
    return dx, dgamma, dbeta


# -- activations ----------------------------------------------------------------

def activation(x, fn):
    if fn == "relu":
        return np.maximum(x, 0)
    if fn == "relu6":
        return np.clip(x, 0, 6)
    if fn == "hard_swish":
        return x * np.clip(x + 3, 0, 6) / 6
    raise ValueError(f"unknown activation {fn!r}")


def activation_backward(dy, x, fn):
    if fn == "relu":
        return dy * (x > 0)
    if fn == "relu6":
        return dy * ((x > 0) & (x < 6))
    if fn == "hard_swish":
        grad = np.where(x <= -3, 0, np.where(x >= 3, 1, (2 * x + 3) / 6)).astype(dy.dtype)
        return dy * grad
    raise ValueError(f"unknown activation {fn!r}")


# -- shuffle / pooling / linear / normalization ---------------------------------------

def channel_shuffle(x, groups):
    n, c = x.shape[:2]
    if c % groups:
        raise ShapeMismatch(f"{c} channels not divisible by {groups} groups")
    rest = x.shape[2:]
    return np.ascontiguousarray(
        x.reshape(n, groups, c // groups, *rest).swapaxes(1, 2).reshape(x.shape))


def channel_shuffle_backward(dy, groups):
    # the inverse of shuffle(g) is shuffle(C/g)
    return channel_shuffle(dy, dy.shape[1] // groups)


def global_avg_pool(x):
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(dy, shape):
    n, c, h, w = shape
    return np.broadcast_to((dy / (h * w))[:, :, None, None], shape).copy()


def linear(x, w, b=None):
    out = x @ w.T
    return out + b if b is not None else out


def linear_backward(dy, x, w):
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def l2_normalize(x, eps=1e-12):
    """Row-wise unit normalization. Rows with norm < eps become zero.

    Returns (normalized, norms, degenerate_mask).
    """
    norms = np.sqrt((x.astype(np.float64) ** 2).sum(axis=1))
    bad = norms < eps
    safe = np.where(bad, 1.0, norms)
    with np.errstate(invalid="ignore"):   # inf rows become nan; callers flag non-finite output
        y = (x / safe[:, None]).astype(x.dtype)
    y[bad] = 0
    return y, norms, bad


def l2_normalize_backward(dy, y, norms):
    safe = np.where(norms < 1e-12, np.inf, norms).astype(dy.dtype)
    return (dy - y * (dy * y).sum(axis=1, keepdims=True)) / safe[:, None]
