"""Attention-Mix: a sigmoid gate, computed from the colour stream, blending colour and depth features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import DimensionError, Tensor


@dataclass
class AmParams:
    """1x1 convolution producing the gate logits for one encoder stage."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        c = self.weight.shape[0]
        if self.weight.shape != (c, c) or self.bias.shape != (c,):
            raise DimensionError(f"gate conv must be {c}x{c} with a ({c},) bias")

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, std: float = 0.02) -> "AmParams":
        return cls(
            Tensor(rng.normal(0.0, std, (channels, channels)), requires_grad=True),
            Tensor(np.zeros(channels), requires_grad=True),
        )

    @classmethod
    def zeros(cls, channels: int) -> "AmParams":
        return cls(Tensor(np.zeros((channels, channels)), requires_grad=True),
                   Tensor(np.zeros(channels), requires_grad=True))


def gate(o_c: Tensor, params: AmParams) -> Tensor:
    return ops.sigmoid(ops.conv1x1(o_c, params.weight, params.bias))


def attention_mix(o_c: Tensor, o_d: Tensor, params: AmParams) -> Tensor:
    """``o_c * g + o_d * (1 - g)`` with ``g = sigmoid(conv1x1(o_c))``, pointwise."""
    if o_c.shape != o_d.shape:
        raise DimensionError(f"colour {o_c.shape} and depth {o_d.shape} outputs differ")
    if o_c.shape[-1] != params.channels:
        raise DimensionError(f"gate expects {params.channels} channels, got {o_c.shape[-1]}")
    g = gate(o_c, params)
    out = o_c * g + o_d * (1.0 - g)
    # the exact mix is convex; rounding can push it an ulp or so outside
    # [min, max], so add back the residue as a constant (gradient unchanged)
    lo, hi = np.minimum(o_c.data, o_d.data), np.maximum(o_c.data, o_d.data)
    residue = np.clip(out.data, lo, hi) - out.data
    return out + Tensor(residue) if residue.any() else out
