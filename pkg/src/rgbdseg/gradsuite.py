"""Seeded finite-difference sweep over every differentiable operation and the full model.

Each case builds fresh random inputs from a seed and returns a scalar probe
plus the tensors to perturb. Inputs to kinked ops are kept away from the
kink so the central difference never straddles it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import ops, tensor as T
from .attention import AttentionParams, CiaConfig, SWAP_MODES, cia, multi_head, scaled_dot_attention
from .fusion import AmParams, attention_mix
from .gradcheck import GradReport, check, weighted_sum
from .model import ModelConfig, SegModel
from .tensor import Tensor

OP_TOL = 1e-5
MODEL_TOL = 1e-4
GROUPS = ("tensor", "attention", "fusion", "model")

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _leaf(rng, *shape, away_from_zero=False):
    x = rng.normal(size=shape)
    if away_from_zero:
        x = np.sign(x) * (np.abs(x) + 0.1)
    return Tensor(x, requires_grad=True)


def _probe(fn, out_shape, rng):
    w = rng.normal(size=out_shape)
    return lambda: weighted_sum(fn(), w)


def _binary(op, b_shape=(4,)):
    def case(rng):
        a, b = _leaf(rng, 3, 4), _leaf(rng, *b_shape, away_from_zero=True)
        return _probe(lambda: op(a, b), (3, 4), rng), [a, b]
    return case


def _unary(op, shape=(3, 5), out_shape=None, kink=False):
    def case(rng):
        x = _leaf(rng, *shape, away_from_zero=kink)
        return _probe(lambda: op(x), out_shape or shape, rng), [x]
    return case


def _layer_norm(rng):
    x, g, b = _leaf(rng, 4, 6), _leaf(rng, 6), _leaf(rng, 6)
    return _probe(lambda: ops.layer_norm(x, g, b), (4, 6), rng), [x, g, b]


def _linear(rng):
    x, w, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5)
    return _probe(lambda: ops.linear(x, w, b), (2, 3, 5), rng), [x, w, b]


def _matmul(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    return _probe(lambda: a @ b, (2, 3, 5), rng), [a, b]


def _concat_split(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 5)

    def fn():
        left, right = T.split(T.concat([a, b], axis=1), 2, axis=1)
        return left * right
    return _probe(fn, (2, 4), rng), [a, b]


def _cross_entropy(rng):
    x = _leaf(rng, 2, 3, 4)
    labels = rng.integers(0, 4, size=(2, 3))
    return (lambda: ops.cross_entropy(x, labels)), [x]


def _upsample_bilinear(rng):
    x = _leaf(rng, 1, 2, 3, 2)
    return _probe(lambda: ops.upsample_bilinear(x, (4, 6)), (1, 4, 6, 2), rng), [x]


TENSOR_CASES: dict[str, Case] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div_scalar": _unary(lambda x: x / 3.0),
    "neg": _unary(T.neg),
    "matmul": _matmul,
    "transpose": _unary(lambda x: T.transpose(x, (1, 0)), out_shape=(5, 3)),
    "swapaxes": _unary(lambda x: T.swapaxes(x, 0, 1), out_shape=(5, 3)),
    "reshape": _unary(lambda x: T.reshape(x, (5, 3)), out_shape=(5, 3)),
    "concat_split": _concat_split,
    "roll": _unary(lambda x: T.roll(x, 2, axis=1)),
    "sum": _unary(lambda x: T.sum(x, axis=1), out_shape=(3,)),
    "mean": _unary(lambda x: T.mean(x, axis=0, keepdims=True), out_shape=(1, 5)),
    "relu": _unary(ops.relu, kink=True),
    "gelu": _unary(ops.gelu),
    "sigmoid": _unary(ops.sigmoid),
    "softmax": _unary(ops.softmax),
    "layer_norm": _layer_norm,
    "linear": _linear,
    "avg_pool2x": _unary(ops.avg_pool2x, shape=(1, 4, 4, 2), out_shape=(1, 2, 2, 2)),
    "upsample_nearest": _unary(lambda x: ops.upsample_nearest(x, 2), shape=(1, 2, 3, 2), out_shape=(1, 4, 6, 2)),
    "upsample_bilinear": _upsample_bilinear,
    "cross_entropy": _cross_entropy,
}


def _attn_params(rng, c=4, heads=2):
    return AttentionParams(*(Tensor(rng.normal(0, 0.5, (c, c)), requires_grad=True) for _ in range(4)),
                           num_heads=heads)


def _sdpa(rng):
    q, k, v = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 3, 4), _leaf(rng, 2, 3, 4)
    return _probe(lambda: scaled_dot_attention(q, k, v), (2, 3, 4), rng), [q, k, v]


def _multi_head(rng):
    x = _leaf(rng, 2, 5, 4)
    p = _attn_params(rng)
    return _probe(lambda: multi_head(x, x, x, p), (2, 5, 4), rng), [x, *p.named().values()]


def _cia(mode):
    def case(rng):
        xc, xd = _leaf(rng, 1, 5, 4), _leaf(rng, 1, 5, 4)
        p = _attn_params(rng)
        w = rng.normal(size=(2, 1, 5, 4))
        cfg = CiaConfig(mode)

        def fn():
            oc, od = cia(xc, xd, p, cfg)
            return weighted_sum(oc, w[0]) + weighted_sum(od, w[1])
        return fn, [xc, xd, *p.named().values()]
    return case


ATTENTION_CASES: dict[str, Case] = {"scaled_dot": _sdpa, "multi_head": _multi_head}
ATTENTION_CASES.update({f"cia_{m}": _cia(m) for m in SWAP_MODES})


def _am(rng):
    oc, od = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 3, 4)
    p = AmParams(_leaf(rng, 4, 4), _leaf(rng, 4))
    return _probe(lambda: attention_mix(oc, od, p), (2, 3, 4), rng), [oc, od, p.weight, p.bias]


FUSION_CASES: dict[str, Case] = {"attention_mix": _am}

# a 16x16 model small enough to sweep many seeds; covers dual branches,
# 3-D encodings, key swapping and gated fusion in one graph
GRAD_MODEL = ModelConfig(image_size=16, patch_size=4, channels=(8, 8), depths=(1, 1), heads=(1, 2),
                         num_classes=3, pe_mode="3d", swap_mode="cross_k", fusion="attention_mix",
                         branches="dual", decoder_dim=8, mlp_ratio=2, max_disparity=16.0)


def model_case(config: ModelConfig = GRAD_MODEL, coords: int = 2) -> Case:
    def case(rng):
        seed = int(rng.integers(2**31))
        model = SegModel(config, seed=seed, zero_head=False, std=0.3)
        side = config.image_size
        rgb = rng.random((1, side, side, 3))
        disp = rng.integers(1, int(config.max_disparity) + 1, size=(1, side, side, 1)) / config.max_disparity
        w = rng.normal(size=(1, side, side, config.num_classes))
        return (lambda: weighted_sum(model(rgb, disp), w)), model.parameters()
    case.coords = coords
    return case


MODEL_CASES: dict[str, Case] = {
    "model_16x16": model_case(),
    "model_16x16_sum": model_case(replace(GRAD_MODEL, pe_mode="2d", swap_mode="cross_qk", fusion="sum"), coords=1),
}


def cases(group: str = "all") -> dict[str, tuple[Case, float]]:
    table = {"tensor": (TENSOR_CASES, OP_TOL), "attention": (ATTENTION_CASES, OP_TOL),
             "fusion": (FUSION_CASES, OP_TOL), "model": (MODEL_CASES, MODEL_TOL)}
    if group != "all" and group not in table:
        raise ValueError(f"unknown group {group!r}; expected all or one of {GROUPS}")
    out = {}
    for name in GROUPS if group == "all" else (group,):
        found, tol = table[name]
        out.update({k: (c, tol) for k, c in found.items()})
    return out


@dataclass
class SuiteResult:
    name: str
    tol: float
    seeds: int
    max_rel_error: float
    checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tol


def run_case(name: str, case: Case, tol: float, seeds: int = 20, base_seed: int = 0) -> SuiteResult:
    worst, checked = 0.0, 0
    coords = getattr(case, "coords", None)
    for s in range(seeds):
        rng = np.random.default_rng([base_seed, s])
        fn, params = case(rng)
        rep: GradReport = check(fn, params, coords=coords, rng=rng, name=name)
        worst = max(worst, rep.max_rel_error)
        checked += rep.checked
    return SuiteResult(name, tol, seeds, worst, checked)


def run(group: str = "all", seeds: int = 20, base_seed: int = 0) -> tuple[list[SuiteResult], float]:
    """All cases in ``group``; returns the results and the wall time in seconds."""
    start = time.perf_counter()
    results = [run_case(n, c, tol, seeds, base_seed) for n, (c, tol) in cases(group).items()]
    return results, time.perf_counter() - start
