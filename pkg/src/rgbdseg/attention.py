"""Scaled dot-product attention, multi-head wrapping and Cross-Input Attention.

Cross-Input Attention runs the colour and depth branches through one shared
set of projections and then draws the query, key or value of each branch's
attention from the *other* branch, according to a swap mode:

=========  ====================  ====================
mode       colour output         depth output
=========  ====================  ====================
none       attn(Qc, Kc, Vc)      attn(Qd, Kd, Vd)
cross_q    attn(Qd, Kc, Vc)      attn(Qc, Kd, Vd)
cross_k    attn(Qc, Kd, Vc)      attn(Qd, Kc, Vd)
cross_v    attn(Qc, Kc, Vd)      attn(Qd, Kd, Vc)
cross_qk   attn(Qd, Kd, Vc)      attn(Qc, Kc, Vd)
=========  ====================  ====================

With shared weights, ``cross_qk`` is ``cross_v`` with the two outputs exchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import DimensionError, Tensor, concat, matmul, reshape, roll, split, swapaxes

SWAP_MODES = ("none", "cross_q", "cross_k", "cross_v", "cross_qk")

# which branch feeds (Q, K, V) of the colour output; the depth output mirrors it
_SOURCES = {
    "none": ("c", "c", "c"),
    "cross_q": ("d", "c", "c"),
    "cross_k": ("c", "d", "c"),
    "cross_v": ("c", "c", "d"),
    "cross_qk": ("d", "d", "c"),
}


@dataclass(frozen=True)
class CiaConfig:
    swap_mode: str = "none"

    def __post_init__(self):
        if self.swap_mode not in SWAP_MODES:
            raise ValueError(f"unknown swap mode {self.swap_mode!r}; expected one of {SWAP_MODES}")


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    num_heads: int

    def __post_init__(self):
        c = self.wq.shape[0]
        for w in (self.wq, self.wk, self.wv, self.wo):
            if w.shape != (c, c):
                raise DimensionError(f"projection weights must be {c}x{c}, got {w.shape}")
        if self.num_heads <= 0 or c % self.num_heads:
            raise ValueError(f"{c} channels cannot be split into {self.num_heads} heads")

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    @property
    def d_head(self) -> int:
        return self.channels // self.num_heads

    @classmethod
    def init(cls, channels: int, num_heads: int, rng: np.random.Generator, std: float = 0.02):
        ws = [Tensor(rng.normal(0.0, std, (channels, channels)), requires_grad=True) for _ in range(4)]
        return cls(*ws, num_heads=num_heads)

    def named(self) -> dict[str, Tensor]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic ``softmax(q k^T / sqrt(d_head))`` over ``[..., n, d_head]`` inputs."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query/key head dims differ: {q.shape} vs {k.shape}")
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    return ops.softmax(scores, axis=-1)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise DimensionError(f"attention shapes disagree: Q{q.shape} K{k.shape} V{v.shape}")
    return matmul(attention_weights(q, k), v)


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    """``[..., n, C]`` -> ``[..., heads, n, C / heads]``."""
    *lead, n, c = x.shape
    x = reshape(x, (*lead, n, num_heads, c // num_heads))
    return swapaxes(x, -2, -3)


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    return reshape(swapaxes(x, -2, -3), (*lead, n, h * dh))


def _check_same(*xs: Tensor, channels: int) -> None:
    shape = xs[0].shape
    if any(x.shape != shape for x in xs) or shape[-1] != channels:
        raise DimensionError(f"attention sources must share shape [..., n, {channels}], got {[x.shape for x in xs]}")


def multi_head(x_q: Tensor, x_k: Tensor, x_v: Tensor, params: AttentionParams) -> Tensor:
    """Multi-head attention whose query, key and value come from separate sources."""
    _check_same(x_q, x_k, x_v, channels=params.channels)
    h = params.num_heads
    q = split_heads(ops.linear(x_q, params.wq), h)
    k = split_heads(ops.linear(x_k, params.wk), h)
    v = split_heads(ops.linear(x_v, params.wv), h)
    return ops.linear(merge_heads(scaled_dot_attention(q, k, v)), params.wo)


def _cross_source(stacked: Tensor, own: bool) -> Tensor:
    """A ``[c; d]`` batch-stacked projection as is, or with its halves exchanged."""
    return stacked if own else roll(stacked, stacked.shape[0] // 2, axis=0)


def cia_stacked(x: Tensor, params: AttentionParams, config: CiaConfig) -> Tensor:
    """Cross-Input Attention on colour and depth tokens stacked along axis 0 (colour half first).

    Both halves share every projection, so each projection runs once on the
    stacked batch; the swap only decides which half feeds Q, K and V.
    """
    if not isinstance(config, CiaConfig):
        config = CiaConfig(config)
    if x.ndim < 3 or x.shape[0] % 2 or x.shape[-1] != params.channels:
        raise DimensionError(f"expected [2B, ..., n, {params.channels}] stacked input, got {x.shape}")
    h = params.num_heads
    src = _SOURCES[config.swap_mode]
    q, k, v = (_cross_source(split_heads(ops.linear(x, w), h), tag == "c")
               for w, tag in zip((params.wq, params.wk, params.wv), src))
    return ops.linear(merge_heads(scaled_dot_attention(q, k, v)), params.wo)


def cia(x_c: Tensor, x_d: Tensor, params: AttentionParams, config: CiaConfig) -> tuple[Tensor, Tensor]:
    """Cross-Input Attention over a colour/depth pair; returns ``(out_c, out_d)``."""
    _check_same(x_c, x_d, channels=params.channels)
    shape = x_c.shape
    stacked = concat([reshape(x_c, (1, *shape)), reshape(x_d, (1, *shape))], axis=0)
    out_c, out_d = split(cia_stacked(stacked, params, config), 2, axis=0)
    return reshape(out_c, shape), reshape(out_d, shape)
