"""Flat ``key = value`` run configuration shared by the CLI subcommands."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path


def read_flat_config(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_value(default, raw: str):
    if isinstance(default, bool):
        low = str(raw).strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("1", "true", "yes", "on")
    if isinstance(default, tuple):
        return tuple(int(x) for x in str(raw).split(",") if x.strip())
    return type(default)(raw)


@dataclass(frozen=True)
class RunConfig:
    # model
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
    max_disparity: float = 64.0
    # scene generation
    data_seed: int = 0
    min_objects: int = 3
    max_objects: int = 5
    min_size: int = 10
    max_size: int = 24
    depth_planes: int = 4
    ambiguous: bool = False
    speckle: float = 0.0
    dropout: float = 0.0
    texture: float = 0.04
    val_every: int = 5
    # training
    seed: int = 0
    steps: int = 2000
    batch_size: int = 4
    lr: float = 6e-4
    weight_decay: float = 0.01
    eval_every: int = 500
    flip: bool = True

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def updated(self, values: dict[str, str]) -> "RunConfig":
        known = {f.name: f.default for f in fields(self)}
        parsed = {}
        for key, raw in values.items():
            if key not in known:
                raise KeyError(f"unknown config key {key!r}")
            try:
                parsed[key] = parse_value(known[key], raw)
            except ValueError as exc:
                raise ValueError(f"bad value for {key}: {exc}") from exc
        return replace(self, **parsed)

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: dict[str, str] | None = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            cfg = cfg.updated(read_flat_config(path))
        if overrides:
            cfg = cfg.updated(overrides)
        return cfg

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            lines.append(f"{f.name} = {','.join(map(str, val)) if isinstance(val, tuple) else val}")
        return "\n".join(lines) + "\n"

    def model_config(self):
        from .model import ModelConfig

        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: getattr(self, k) for k in names})

    def scene_spec(self):
        from .data import SceneSpec

        return SceneSpec(
            seed=self.data_seed, height=self.image_size, width=self.image_size,
            num_classes=self.num_classes, min_objects=self.min_objects, max_objects=self.max_objects,
            min_size=self.min_size, max_size=self.max_size, depth_planes=self.depth_planes,
            ambiguous=self.ambiguous, speckle=self.speckle, dropout=self.dropout, texture=self.texture,
            max_disparity=int(round(self.max_disparity)), val_every=self.val_every,
        )

    def train_config(self):
        from .train import TrainConfig

        return TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                           weight_decay=self.weight_decay, eval_every=self.eval_every,
                           seed=self.seed, flip=self.flip)
