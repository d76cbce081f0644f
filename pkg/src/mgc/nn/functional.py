"""Differentiable layer functions built on :class:`~mgc.nn.tensor.Tensor`.

Layout convention for images is NCHW. All functions return new tensors and
register a backward closure; none of them mutate their inputs.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .tensor import DTYPE, Tensor, as_tensor, matmul


def _axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"{op}: axis {axis} out of range for {ndim}-d input")
    return axis % ndim


# -- activations --------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    d = x.data
    # split branches keep exp() from overflowing for large |d|
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._make(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _axis(axis, x.ndim, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), "softmax", back)


def logsumexp(x: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _axis(axis, x.ndim, "log_softmax")
    out = x.data - logsumexp(x.data, axis, keepdims=True)

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), "log_softmax", back)


# -- dense layers -------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as (out_features, in_features)."""
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight in-dim {w.shape[1]}")
    y = matmul(x, w.transpose())
    return y + b if b is not None else y


def layer_norm(x: Tensor, n_axes: int, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing ``n_axes`` axes of every sample.

    ``gamma``/``beta`` broadcast against the trailing shape, e.g. (C, 1, 1) for
    a per-channel affine on NCHW feature maps.
    """
    x = as_tensor(x)
    axes = tuple(range(x.ndim - n_axes, x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    out = Tensor._make(xhat, (x,), "layer_norm", back)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


# -- convolution and pooling --------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (C*kh*kw, N*ho*wo), rows ordered like a flattened weight."""
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(c, kh, kw, n, ho, wo),
        strides=(s1, s2, s3, s0, s2 * stride, s3 * stride), writeable=False)
    return view.reshape(c * kh * kw, n * ho * wo)


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> tuple[np.ndarray, np.ndarray]:
    n, _, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError("conv2d: kernel larger than padded input")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = (w.reshape(cout, -1) @ cols).reshape(cout, n, ho, wo)
    return out, cols


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, (Cout, Cin, kh, kw) weights."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects 4-d input and weight")
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    if c != cin:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d: kernel sizes must be odd")
    out_cn, cols = _conv_forward(x.data, w.data, stride, padding)
    if b is not None:
        out_cn += b.data[:, None, None, None]
    out = np.ascontiguousarray(out_cn.transpose(1, 0, 2, 3))
    ho, wo = out.shape[2:]

    def back(g):
        g_cn = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
        gflat = g_cn.reshape(cout, -1)
        gw = (gflat @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = gflat.sum(axis=1) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            if stride == 1:
                # transposed conv == correlation of the output grad with the flipped kernel
                wt = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gx_cn, _ = _conv_forward(g, wt, 1, kh - 1 - padding)
                gx = np.ascontiguousarray(gx_cn.transpose(1, 0, 2, 3))
            else:
                dcols = (w.data.reshape(cout, -1).T @ gflat).reshape(cin, kh, kw, n, ho, wo)
                gxp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding), dtype=DTYPE)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            dcols[:, i, j].transpose(1, 0, 2, 3)
                gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._make(out, parents, "conv2d", back)


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k×k max pooling (stride k); H and W must divide by k."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"max_pool2d: spatial dims {h}x{w} not divisible by {k}")
    blocks = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gb,)

    return Tensor._make(out, (x,), "max_pool2d", back)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d: spatial dims {h}x{w} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def back(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return Tensor._make(out, (x,), "avg_pool2d", back)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    return as_tensor(x).mean(axis=(2, 3))


@lru_cache(maxsize=64)
def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Interpolation matrix for 1-D bilinear resampling, half-pixel centres.

    Matches ``align_corners=False``: source coordinate ``(i + 0.5) * n_in /
    n_out - 0.5`` clamped to ``[0, n_in - 1]``.
    """
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    m.flags.writeable = False
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the two trailing axes with separable bilinear interpolation."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    ry = bilinear_matrix(out_h, h)
    rx = bilinear_matrix(out_w, w)
    out = ry @ x.data @ rx.T

    def back(g):
        return (ry.T @ g @ rx,)

    return Tensor._make(out, (x,), "resize_bilinear", back)


def bilinear_upsample(x: Tensor, factor: int = 2) -> Tensor:
    h, w = x.shape[-2:]
    return resize_bilinear(x, h * factor, w * factor)


# -- attention ------------------------------------------------------------------

def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(q kᵀ / √d) v over the last two axes.

    Returns ``(output, weights)``; weights are row-stochastic over the key axis.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"attention: query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    d = q.shape[-1]
    scores = matmul(q, k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (1.0 / np.sqrt(d))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights


# -- losses ---------------------------------------------------------------------

def cross_entropy(logits: Tensor, target: np.ndarray, axis: int = 1) -> Tensor:
    """Mean over all non-class positions of ``-z_y + logsumexp(z)``.

    ``target`` holds integer class indices with the class axis removed, so
    (N, K) logits take (N,) targets and (N, K, H, W) logits take (N, H, W).
    """
    logits = as_tensor(logits)
    axis = _axis(axis, logits.ndim, "cross_entropy")
    k = logits.shape[axis]
    target = np.asarray(target)
    if not np.issubdtype(target.dtype, np.integer):
        raise ValueError("cross_entropy: target must hold integer class indices")
    if target.size and (target.min() < 0 or target.max() >= k):
        raise ValueError(f"cross_entropy: label outside [0, {k})")
    z = logits.data
    lse = logsumexp(z, axis)
    zy = np.take_along_axis(z, np.expand_dims(target, axis), axis=axis).squeeze(axis)
    count = lse.size
    loss = np.asarray((lse - zy).sum() / count)

    def back(g):
        p = np.exp(z - np.expand_dims(lse, axis))
        np.put_along_axis(p, np.expand_dims(target, axis),
                          np.take_along_axis(p, np.expand_dims(target, axis), axis=axis) - 1.0, axis=axis)
        return (p * (g / count),)

    return Tensor._make(loss, (logits,), "cross_entropy", back)


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy, stable form ``max(z,0) - z·y + log(1+e^{-|z|})``."""
    logits = as_tensor(logits)
    y = np.asarray(target, dtype=DTYPE)
    if y.shape != logits.shape:
        raise ValueError(f"bce_with_logits: target shape {y.shape} != logits shape {logits.shape}")
    z = logits.data
    loss = np.asarray((np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean())
    e = np.exp(-np.abs(z))
    p = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def back(g):
        return ((p - y) * (g / z.size),)

    return Tensor._make(loss, (logits,), "bce_with_logits", back)


def mse(pred: Tensor, target) -> Tensor:
    d = as_tensor(pred) - as_tensor(target)
    return (d * d).mean()
