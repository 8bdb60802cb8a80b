"""Toy dual-branch transformer segmenter.

Two encoder stages (non-overlapping patch embedding, then 2x2 patch merging)
of pre-norm transformer blocks. Positional encodings are added to the tokens
before every block. In dual mode the colour and depth branches run through the
*same* parameter tensors; their per-stage outputs are fused by summation or
Attention-Mix and handed to an all-MLP decoder.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import ops
from .attention import SWAP_MODES, AttentionParams, CiaConfig, cia_stacked, multi_head
from .config import read_flat_config
from .fusion import AmParams, attention_mix
from .posenc import PeSpec, grid_coords, pe1d, pe1d_unique, sum_terms
from .tensor import DimensionError, NonFiniteError, Tensor, concat, load_tensor, reshape, save_tensor, split, transpose

PE_MODES = ("none", "2d", "3d")
FUSIONS = ("sum", "attention_mix")
BRANCHES = ("rgb_only", "depth_only", "dual")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 4
    channels: tuple[int, ...] = (32, 64)
    depths: tuple[int, ...] = (2, 2)
    heads: tuple[int, ...] = (1, 2)
    num_classes: int = 4
    pe_mode: str = "2d"
    swap_mode: str = "none"
    fusion: str = "sum"
    branches: str = "rgb_only"
    decoder_dim: int = 64
    mlp_ratio: int = 4
    # largest raw disparity: normalizes disparity and sets the frequency scale of its encoding
    max_disparity: float = 64.0

    def __post_init__(self):
        for name in ("channels", "depths", "heads"):
            object.__setattr__(self, name, tuple(int(x) for x in getattr(self, name)))
        n = len(self.channels)
        if n == 0 or len(self.depths) != n or len(self.heads) != n:
            raise ValueError("channels, depths and heads need one entry per stage")
        for c, h in zip(self.channels, self.heads):
            if h <= 0 or c % h:
                raise ValueError(f"stage width {c} is not divisible by {h} heads")
            if c % 2:
                raise ValueError(f"stage width {c} must be even for sinusoidal encodings")
        side = self.image_size
        if side <= 0 or side & (side - 1):
            raise ValueError(f"image size must be a power of two, got {side}")
        if side % (self.patch_size * 2 ** (n - 1)):
            raise ValueError("image size must be divisible by patch size * 2**(stages-1)")
        if self.pe_mode not in PE_MODES:
            raise ValueError(f"pe_mode must be one of {PE_MODES}")
        if self.swap_mode not in SWAP_MODES:
            raise ValueError(f"swap_mode must be one of {SWAP_MODES}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.branches not in BRANCHES:
            raise ValueError(f"branches must be one of {BRANCHES}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if not self.max_disparity > 1:
            raise ValueError("max_disparity must exceed 1")

    @property
    def num_stages(self) -> int:
        return len(self.channels)

    def stride(self, stage: int) -> int:
        return self.patch_size * 2 ** stage

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            out[f.name] = ",".join(str(x) for x in val) if isinstance(val, tuple) else str(val)
        return out

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        for key, raw in values.items():
            if key not in known:
                raise KeyError(f"unknown model key {key!r}")
            default = known[key].default
            if isinstance(default, tuple):
                kwargs[key] = tuple(int(x) for x in str(raw).split(",") if x.strip())
            elif isinstance(default, bool):
                kwargs[key] = str(raw).lower() in ("1", "true", "yes")
            else:
                kwargs[key] = type(default)(raw)
        return cls(**kwargs)


# Table 1 row -> configuration. Rows not named in a key keep the defaults
# (2 stages, 2D encoding, no swap, sum fusion).
TABLE1_ROWS: dict[str, dict[str, str]] = {
    "RGB Baseline": {"branches": "rgb_only", "pe_mode": "2d"},
    "Depth Baseline": {"branches": "depth_only", "pe_mode": "2d"},
    "RGBD": {"branches": "dual", "pe_mode": "2d", "swap_mode": "none", "fusion": "sum"},
    "3D PE": {"branches": "rgb_only", "pe_mode": "3d"},
    "cross-V": {"branches": "dual", "pe_mode": "2d", "swap_mode": "cross_v", "fusion": "sum"},
    "cross-Q": {"branches": "dual", "pe_mode": "2d", "swap_mode": "cross_q", "fusion": "sum"},
    "cross-K": {"branches": "dual", "pe_mode": "2d", "swap_mode": "cross_k", "fusion": "sum"},
    "attn-mix": {"branches": "dual", "pe_mode": "2d", "swap_mode": "none", "fusion": "attention_mix"},
    "Total": {"branches": "dual", "pe_mode": "3d", "swap_mode": "cross_k", "fusion": "attention_mix"},
}


def row_config(row: str, base: ModelConfig | None = None) -> ModelConfig:
    base = base or ModelConfig()
    overrides = {k: v for k, v in TABLE1_ROWS[row].items()}
    return ModelConfig.from_dict({**base.to_dict(), **overrides})


def build_depth_input(disparity) -> Tensor:
    """Replicate a ``[..., H, W, 1]`` disparity map into three channels."""
    d = disparity.data if isinstance(disparity, Tensor) else np.asarray(disparity, dtype=np.float64)
    if d.shape[-1] != 1:
        d = d[..., None]
    return Tensor(np.repeat(d, 3, axis=-1))


@functools.lru_cache(maxsize=64)
def _spatial_terms(channels: int, side: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    coords = grid_coords(side, side, stride)
    spec = PeSpec(channels, side)
    pu, pv = pe1d(coords.u, spec), pe1d(coords.v, spec)
    pu.flags.writeable = False
    pv.flags.writeable = False
    return pu, pv


@dataclass
class Block:
    norm1: tuple[Tensor, Tensor]
    attn: AttentionParams
    norm2: tuple[Tensor, Tensor]
    fc1: tuple[Tensor, Tensor]
    fc2: tuple[Tensor, Tensor]

    def mlp(self, x: Tensor) -> Tensor:
        return ops.linear(ops.gelu(ops.linear(x, *self.fc1)), *self.fc2)

    def __call__(self, x: Tensor, cia_config: CiaConfig | None = None) -> Tensor:
        """Pre-norm attention + MLP. With ``cia_config`` set, ``x`` holds both
        branches stacked along axis 0 (colour first) and attention is cross-input."""
        h = ops.layer_norm(x, *self.norm1)
        x = x + (multi_head(h, h, h, self.attn) if cia_config is None else cia_stacked(h, self.attn, cia_config))
        return x + self.mlp(ops.layer_norm(x, *self.norm2))


class SegModel:
    """Parameters live in ``params`` (name -> leaf tensor); both branches read the same entries."""

    def __init__(self, config: ModelConfig, seed: int = 0, zero_head: bool = True, std: float = 0.02):
        self.config = config
        self.params = {}
        rng = np.random.default_rng(seed)
        cfg = config

        def weight(name, shape, scale=std):
            self.params[name] = Tensor(rng.normal(0.0, scale, shape), requires_grad=True)

        def const(name, shape, value):
            self.params[name] = Tensor(np.full(shape, float(value)), requires_grad=True)

        def norm(prefix, c):
            const(f"{prefix}.g", (c,), 1.0)
            const(f"{prefix}.b", (c,), 0.0)

        p = cfg.patch_size
        for s, c in enumerate(cfg.channels):
            cin = p * p * 3 if s == 0 else 4 * cfg.channels[s - 1]
            weight(f"embed{s}.w", (cin, c))
            const(f"embed{s}.b", (c,), 0.0)
            norm(f"embed{s}.norm", c)
            for k in range(cfg.depths[s]):
                pre = f"stage{s}.block{k}"
                norm(f"{pre}.norm1", c)
                for proj in ("wq", "wk", "wv", "wo"):
                    weight(f"{pre}.attn.{proj}", (c, c))
                norm(f"{pre}.norm2", c)
                hidden = cfg.mlp_ratio * c
                weight(f"{pre}.fc1.w", (c, hidden))
                const(f"{pre}.fc1.b", (hidden,), 0.0)
                weight(f"{pre}.fc2.w", (hidden, c))
                const(f"{pre}.fc2.b", (c,), 0.0)
            norm(f"stage{s}.norm", c)
        if self.uses_attention_mix:
            for s, c in enumerate(cfg.channels):
                weight(f"am{s}.w", (c, c))
                const(f"am{s}.b", (c,), 0.0)
        dd = cfg.decoder_dim
        for s, c in enumerate(cfg.channels):
            weight(f"dec.proj{s}.w", (c, dd))
            const(f"dec.proj{s}.b", (dd,), 0.0)
        weight("dec.fuse.w", (cfg.num_stages * dd, dd))
        const("dec.fuse.b", (dd,), 0.0)
        if zero_head:
            const("dec.cls.w", (dd, cfg.num_classes), 0.0)
        else:
            weight("dec.cls.w", (dd, cfg.num_classes))
        const("dec.cls.b", (cfg.num_classes,), 0.0)

    # -- structure -----------------------------------------------------

    @property
    def uses_attention_mix(self) -> bool:
        return self.config.branches == "dual" and self.config.fusion == "attention_mix"

    def _pair(self, prefix: str) -> tuple[Tensor, Tensor]:
        first = "g" if f"{prefix}.g" in self.params else "w"
        return self.params[f"{prefix}.{first}"], self.params[f"{prefix}.b"]

    def block(self, stage: int, k: int) -> Block:
        pre = f"stage{stage}.block{k}"
        attn = AttentionParams(*(self.params[f"{pre}.attn.{w}"] for w in ("wq", "wk", "wv", "wo")),
                               num_heads=self.config.heads[stage])
        return Block(self._pair(f"{pre}.norm1"), attn, self._pair(f"{pre}.norm2"),
                     self._pair(f"{pre}.fc1"), self._pair(f"{pre}.fc2"))

    def am_params(self, stage: int) -> AmParams:
        return AmParams(*self._pair(f"am{stage}"))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    # -- forward -------------------------------------------------------

    def _embed(self, x: Tensor, stage: int) -> Tensor:
        """Non-overlapping patchify (stage 0) or 2x2 merge, then linear + norm; returns ``[B, h, w, C]``."""
        B, H, W, cin = x.shape
        f = self.config.patch_size if stage == 0 else 2
        x = reshape(x, (B, H // f, f, W // f, f, cin))
        x = transpose(x, (0, 1, 3, 2, 4, 5))
        x = reshape(x, (B, H // f, W // f, f * f * cin))
        x = ops.linear(x, *self._pair(f"embed{stage}"))
        return ops.layer_norm(x, *self._pair(f"embed{stage}.norm"))

    def stage_pe(self, stage: int, depth: np.ndarray) -> np.ndarray | None:
        """Encodings for the stage's tokens, ``[B or 1, n, C]``; ``depth`` is normalized ``[B, H, W]``."""
        cfg = self.config
        if cfg.pe_mode == "none":
            return None
        c = cfg.channels[stage]
        pu, pv = _spatial_terms(c, cfg.image_size, cfg.stride(stage))
        if cfg.pe_mode == "2d":
            return (pu + pv).reshape(1, -1, c)
        d = grid_coords(cfg.image_size, cfg.image_size, cfg.stride(stage), depth).d
        pd = pe1d_unique(d, PeSpec(c, cfg.max_disparity))
        return sum_terms(pu, pv, pd).reshape(depth.shape[0], -1, c)

    def fuse(self, outs: list[Tensor], stage: int) -> Tensor:
        if len(outs) == 1:
            return outs[0]
        if self.config.fusion == "attention_mix":
            return attention_mix(outs[0], outs[1], self.am_params(stage))
        return outs[0] + outs[1]

    def encode(self, inputs: list[Tensor], depth: np.ndarray) -> list[Tensor]:
        """Run one or two branches through the shared encoder; returns fused per-stage maps.

        Two branches travel stacked along the batch axis, so every shared
        layer runs once on ``2B`` samples.
        """
        cfg = self.config
        branches = len(inputs)
        cia_config = CiaConfig(cfg.swap_mode) if branches == 2 else None
        x = inputs[0] if branches == 1 else concat(inputs, axis=0)
        fused = []
        for s in range(cfg.num_stages):
            x = self._embed(x, s)
            B2, h, w, c = x.shape
            x = reshape(x, (B2, h * w, c))
            pe = self.stage_pe(s, depth)
            if pe is not None and pe.shape[0] > 1 and branches == 2:
                pe = np.concatenate([pe, pe], axis=0)
            pe_t = None if pe is None else Tensor(pe)
            for k in range(cfg.depths[s]):
                if pe_t is not None:
                    x = x + pe_t
                x = self.block(s, k)(x, cia_config)
            x = reshape(ops.layer_norm(x, *self._pair(f"stage{s}.norm")), (B2, h, w, c))
            fused.append(self.fuse(split(x, branches, axis=0) if branches == 2 else [x], s))
        return fused

    def decode(self, feats: list[Tensor]) -> Tensor:
        cfg = self.config
        h0, w0 = feats[0].shape[1:3]
        ups = []
        for s, f in enumerate(feats):
            f = ops.linear(f, *self._pair(f"dec.proj{s}"))
            ups.append(ops.upsample_bilinear(f, (h0, w0)))
        x = ops.gelu(ops.linear(concat(ups, axis=-1), *self._pair("dec.fuse")))
        logits = ops.linear(x, *self._pair("dec.cls"))
        return ops.upsample_bilinear(logits, (cfg.image_size, cfg.image_size))

    def branch_inputs(self, rgb: Tensor, disparity: np.ndarray) -> list[Tensor]:
        mode = self.config.branches
        if mode == "rgb_only":
            return [rgb]
        if mode == "depth_only":
            return [build_depth_input(disparity)]
        return [rgb, build_depth_input(disparity)]

    def forward(self, rgb, disparity) -> Tensor:
        """Per-pixel class logits ``[(B,) H, W, num_classes]`` from rgb and normalized disparity."""
        cfg = self.config
        rgb_t = rgb if isinstance(rgb, Tensor) else Tensor(rgb)
        disp = np.asarray(disparity.data if isinstance(disparity, Tensor) else disparity, dtype=np.float64)
        single = rgb_t.ndim == 3
        if single:
            rgb_t = reshape(rgb_t, (1,) + rgb_t.shape)
            disp = disp[None]
        if disp.ndim == 3:
            disp = disp[..., None]
        side = cfg.image_size
        if rgb_t.shape[1:] != (side, side, 3) or disp.shape != (rgb_t.shape[0], side, side, 1):
            raise DimensionError(f"expected rgb [B,{side},{side},3] and disparity [B,{side},{side},1], "
                                 f"got {rgb_t.shape} and {disp.shape}")
        if not np.isfinite(disp).all():
            raise NonFiniteError("non-finite disparity input")
        if disp.min() < 0 or disp.max() > 1:
            raise ValueError("disparity must be normalized into [0, 1]")
        logits = self.decode(self.encode(self.branch_inputs(rgb_t, disp), disp[..., 0]))
        if single:
            logits = reshape(logits, logits.shape[1:])
        return logits

    __call__ = forward


def count_params(model: SegModel) -> int:
    return int(sum(t.size for t in model.params.values()))


# ---------------------------------------------------------------------------
# checkpoints: one tensor file per parameter plus a manifest

MANIFEST = "manifest.txt"
FORMAT_TAG = "rgbdseg-checkpoint 1"


def save_checkpoint(model: SegModel, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"# {FORMAT_TAG}"]
    for i, (name, t) in enumerate(model.params.items()):
        fname = f"{i:03d}_{name}.tnsr"
        save_tensor(directory / fname, t)
        lines.append(f"{name} {fname}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    (directory / "model.cfg").write_text("".join(f"{k} = {v}\n" for k, v in model.config.to_dict().items()))
    return directory


def load_checkpoint(directory: str | Path) -> SegModel:
    directory = Path(directory)
    config = ModelConfig.from_dict(read_flat_config(directory / "model.cfg"))
    model = SegModel(config)
    seen = set()
    for line in (directory / MANIFEST).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        name, fname = line.split()
        if name not in model.params:
            raise KeyError(f"checkpoint holds unknown parameter {name!r}")
        t = load_tensor(directory / fname)
        if t.shape != model.params[name].shape:
            raise DimensionError(f"{name}: checkpoint shape {t.shape} != model shape {model.params[name].shape}")
        model.params[name].data = t.data
        seen.add(name)
    missing = set(model.params) - seen
    if missing:
        raise KeyError(f"checkpoint lacks parameters {sorted(missing)}")
    return model
