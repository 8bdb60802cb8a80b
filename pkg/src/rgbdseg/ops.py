"""Differentiable building blocks used by the segmentation model.

Spatial tensors are channel-last: ``[..., h, w, C]``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf, expit

from .tensor import DimensionError, Tensor

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._wrap(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def bw(g):
        return (g * (cdf + xd * _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)),)

    return Tensor._wrap(xd * cdf, "gelu", (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return Tensor._wrap(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._wrap(y, "softmax", (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm affine params must be ({c},), got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return Tensor._wrap(xhat * gd + beta.data, "layer_norm", (x, gamma, beta), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-position affine map over the last axis.

    This is also the 1x1 convolution: a channel-last feature map is a stack of
    pixel vectors, so a 1x1 kernel is one matrix multiply on the flattened view.
    """
    cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise DimensionError(f"linear expects {cin} input channels, got {x.shape}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} does not match {cout} outputs")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, cin)
    wd = weight.data
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = (g2 @ wd.T).reshape(lead + (cin,)) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._wrap(out.reshape(lead + (cout,)), "linear", inputs, bw)


conv1x1 = linear


def avg_pool2x(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 on ``[..., h, w, C]``."""
    *lead, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2x needs even spatial size, got {h}x{w}")
    lead = tuple(lead)
    out = x.data.reshape(lead + (h // 2, 2, w // 2, 2, c)).mean(axis=(-4, -2))

    def bw(g):
        g = np.repeat(np.repeat(g, 2, axis=-3), 2, axis=-2)
        return (g * 0.25,)

    return Tensor._wrap(out, "avg_pool2x", (x,), bw)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    *lead, h, w, c = x.shape
    lead = tuple(lead)
    out = np.repeat(np.repeat(x.data, factor, axis=-3), factor, axis=-2)

    def bw(g):
        return (g.reshape(lead + (h, factor, w, factor, c)).sum(axis=(-4, -2)),)

    return Tensor._wrap(out, "upsample_nearest", (x,), bw)


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Interpolation weights mapping ``n_in`` samples to ``n_out`` (half-pixel centers, edge clamp)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Resize ``[..., h, w, C]`` to ``[..., H, W, C]`` with bilinear weights."""
    *_, h, w, _c = x.shape
    H, W = size
    if (H, W) == (h, w):
        return x
    ah = bilinear_matrix(H, h)
    aw = bilinear_matrix(W, w)
    out = np.einsum("Hh,...hwc,Ww->...HWc", ah, x.data, aw, optimize=True)

    def bw(g):
        return (np.einsum("Hh,...HWc,Ww->...hwc", ah, g, aw, optimize=True),)

    return Tensor._wrap(out, "upsample_bilinear", (x,), bw)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; ``labels`` holds integer ids over ``logits.shape[:-1]``."""
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    picked = np.take_along_axis(logp, labels[..., None].astype(np.intp), axis=-1)
    n = labels.size
    loss = -picked.sum() / n

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, labels[..., None].astype(np.intp),
                          np.take_along_axis(grad, labels[..., None].astype(np.intp), axis=-1) - 1.0, axis=-1)
        return (grad * (g / n),)

    return Tensor._wrap(np.asarray(loss), "cross_entropy", (logits,), bw)
