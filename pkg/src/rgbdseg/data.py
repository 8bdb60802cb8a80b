"""Deterministic synthetic RGB-D segmentation scenes.

A scene is a background on the farthest depth plane plus non-overlapping
rectangles and ellipses, each with a class and a depth plane. Class 0 is the
background. With ``ambiguous`` set, classes 1 and 2 share one colour
distribution and are told apart only by depth: class 2 lives on the far half
of the object planes, class 1 on the near half (an odd middle plane is left
to the remaining classes), so the two are equally likely a priori.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .config import parse_value, read_flat_config
from .netpbm import read_pgm, read_ppm, to_uint8, write_pgm, write_ppm
from .posenc import normalize_disparity

FORMAT_TAG = "rgbdseg-dataset 1"
AMBIGUOUS_PAIR = (1, 2)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    height: int = 64
    width: int = 64
    num_classes: int = 4
    min_objects: int = 3
    max_objects: int = 5
    min_size: int = 10
    max_size: int = 24
    depth_planes: int = 4
    ambiguous: bool = False
    # multiplicative disparity noise (std) and probability of a zero (invalid) pixel
    speckle: float = 0.0
    dropout: float = 0.0
    texture: float = 0.04
    max_disparity: int = 64
    val_every: int = 5

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError("scene must have positive area")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.ambiguous and self.num_classes < 3:
            raise ValueError("the ambiguous pair needs classes 1 and 2")
        if self.depth_planes < 2:
            raise ValueError("need a background plane and at least one object plane")
        if self.ambiguous and self.depth_planes < 3:
            raise ValueError("ambiguity needs two disjoint object planes")
        if self.min_objects < max(1, self.depth_planes - 1) or self.max_objects < self.min_objects:
            raise ValueError("object count must cover every object plane")
        if not 0 < self.min_size <= self.max_size <= min(self.height, self.width):
            raise ValueError("invalid object size range")
        if not (0.0 <= self.dropout < 1.0 and self.speckle >= 0.0):
            raise ValueError("invalid disparity noise")
        if not 0 < self.max_disparity <= 65535:
            raise ValueError("max_disparity must fit 16 bits")
        if self.val_every < 1:
            raise ValueError("val_every must be positive")
        if any(not self.allowed_classes(p) for p in range(1, self.depth_planes)):
            raise ValueError("some object plane admits no class; use an even number of object planes")

    def plane_disparity(self, plane: int) -> int:
        """Plane 0 is the farthest (smallest disparity); the last plane sits at ``max_disparity``."""
        return int(round(self.max_disparity * (plane + 1) / self.depth_planes))

    def allowed_classes(self, plane: int) -> list[int]:
        objects = list(range(1, self.num_classes))
        if not self.ambiguous:
            return objects
        near, far = AMBIGUOUS_PAIR
        half = (self.depth_planes - 1) // 2
        rest = [c for c in objects if c not in AMBIGUOUS_PAIR]
        if plane <= half:
            return [far] + rest
        if plane >= self.depth_planes - half:
            return [near] + rest
        return rest

    def to_dict(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> "SceneSpec":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise KeyError(f"unknown scene key {key!r}")
            kwargs[key] = parse_value(known[key].default, raw)
        return cls(**kwargs)


@dataclass
class RgbdSample:
    rgb: np.ndarray  # [H, W, 3] float in [0, 1], 8-bit quantized
    disparity: np.ndarray  # [H, W, 1] raw integer-valued disparity, 0 = invalid
    labels: np.ndarray  # [H, W] int class ids

    def __post_init__(self):
        h, w = self.labels.shape
        if self.rgb.shape != (h, w, 3) or self.disparity.shape != (h, w, 1):
            raise ValueError("rgb, disparity and labels disagree on shape")


def class_colors(num_classes: int, ambiguous: bool) -> np.ndarray:
    base = [(0.5, 0.5, 0.5), (0.85, 0.3, 0.2), (0.2, 0.45, 0.85), (0.3, 0.75, 0.3)]
    colors = [base[k] if k < len(base) else colorsys.hsv_to_rgb((0.13 + 0.37 * k) % 1.0, 0.6, 0.8)
              for k in range(num_classes)]
    if ambiguous:
        colors[AMBIGUOUS_PAIR[1]] = colors[AMBIGUOUS_PAIR[0]]
    return np.array(colors)


def _shape_mask(rng: np.random.Generator, spec: SceneSpec, occupied: np.ndarray, size_cap: int):
    H, W = occupied.shape
    for _ in range(200):
        h = int(rng.integers(spec.min_size, size_cap + 1))
        w = int(rng.integers(spec.min_size, size_cap + 1))
        top = int(rng.integers(0, H - h + 1))
        left = int(rng.integers(0, W - w + 1))
        # one-pixel margin keeps objects apart
        box = (slice(max(top - 1, 0), top + h + 1), slice(max(left - 1, 0), left + w + 1))
        if occupied[box].any():
            continue
        mask = np.zeros((H, W), dtype=bool)
        if rng.random() < 0.5:
            mask[top:top + h, left:left + w] = True
        else:
            yy, xx = np.mgrid[0:h, 0:w]
            cy, cx = (h - 1) / 2, (w - 1) / 2
            inside = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
            mask[top:top + h, left:left + w] = inside
        occupied[box] = True
        return mask
    return None


def generate(spec: SceneSpec, index: int) -> RgbdSample:
    """Render scene ``index``; a pure function of ``(spec, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    H, W = spec.height, spec.width
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    object_planes = list(range(1, spec.depth_planes))
    planes = list(rng.permutation(object_planes)) + list(rng.choice(object_planes, n_obj - len(object_planes)))
    colors = class_colors(spec.num_classes, spec.ambiguous)

    labels = np.zeros((H, W), dtype=np.int64)
    plane_map = np.zeros((H, W), dtype=np.int64)
    rgb = np.empty((H, W, 3))
    rgb[:] = colors[0] + rng.uniform(-0.08, 0.08, 3)
    occupied = np.zeros((H, W), dtype=bool)
    for k, plane in enumerate(planes):
        cap = spec.max_size
        mask = _shape_mask(rng, spec, occupied, cap)
        while mask is None and cap > spec.min_size:
            cap = max(spec.min_size, cap // 2)
            mask = _shape_mask(rng, spec, occupied, cap)
        if mask is None:
            if k < len(object_planes):
                raise RuntimeError(f"scene {index}: cannot place an object on every plane")
            break
        cls = int(rng.choice(spec.allowed_classes(int(plane))))
        labels[mask] = cls
        plane_map[mask] = plane
        rgb[mask] = colors[cls] + rng.uniform(-0.08, 0.08, 3)
    rgb = rgb + rng.normal(0.0, spec.texture, rgb.shape)
    rgb = to_uint8(rgb) / 255.0

    values = np.array([spec.plane_disparity(p) for p in range(spec.depth_planes)], dtype=np.float64)
    disp = values[plane_map]
    if spec.speckle > 0:
        disp = disp * (1.0 + spec.speckle * rng.standard_normal(disp.shape))
    disp = np.clip(np.rint(disp), 1, 65535)
    if spec.dropout > 0:
        disp[rng.random(disp.shape) < spec.dropout] = 0.0
    return RgbdSample(rgb, disp[..., None], labels)


def split_of(seed: int, index: int, val_every: int = 5) -> str:
    return "val" if (index + seed) % val_every == 0 else "train"


# ---------------------------------------------------------------------------
# on-disk layout: <root>/<split>/<index>_{rgb.ppm, disp.pgm, label.pgm}


def write_sample(directory: Path, index: int, sample: RgbdSample) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    write_ppm(directory / f"{index}_rgb.ppm", to_uint8(sample.rgb))
    write_pgm(directory / f"{index}_disp.pgm", sample.disparity[..., 0].astype(np.uint16), maxval=65535)
    write_pgm(directory / f"{index}_label.pgm", sample.labels.astype(np.uint8), maxval=255)


def read_sample(directory: Path, index: int) -> RgbdSample:
    rgb = read_ppm(directory / f"{index}_rgb.ppm").astype(np.float64) / 255.0
    disp = read_pgm(directory / f"{index}_disp.pgm").astype(np.float64)[..., None]
    labels = read_pgm(directory / f"{index}_label.pgm").astype(np.int64)
    return RgbdSample(rgb, disp, labels)


def write_dataset(spec: SceneSpec, count: int, root: str | Path) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for index in range(count):
        write_sample(root / split_of(spec.seed, index, spec.val_every), index, generate(spec, index))
    (root / "scene.cfg").write_text("".join(f"{k} = {v}\n" for k, v in spec.to_dict().items())
                                    + f"count = {count}\n")
    (root / "FORMAT").write_text(FORMAT_TAG + "\n")
    return root


@dataclass
class Split:
    """Stacked samples of one split, disparity already hole-filled and normalized."""

    rgb: np.ndarray
    depth: np.ndarray
    labels: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def stack(samples: list[RgbdSample], indices, max_disparity: float) -> Split:
    return Split(
        np.stack([s.rgb for s in samples]),
        np.stack([normalize_disparity(s.disparity[..., 0], max_disparity)[..., None] for s in samples]),
        np.stack([s.labels for s in samples]),
        np.asarray(list(indices)),
    )


def in_memory(spec: SceneSpec, count: int) -> dict[str, Split]:
    """Generate ``count`` scenes and group them by split without touching disk."""
    groups: dict[str, list[int]] = {"train": [], "val": []}
    for index in range(count):
        groups[split_of(spec.seed, index, spec.val_every)].append(index)
    return {name: stack([generate(spec, i) for i in idx], idx, spec.max_disparity)
            for name, idx in groups.items() if idx}


def read_scene_spec(root: str | Path) -> tuple[SceneSpec, int]:
    values = read_flat_config(Path(root) / "scene.cfg")
    count = int(values.pop("count", 0))
    return SceneSpec.from_dict(values), count


def load_split(root: str | Path, split: str, max_disparity: float | None = None) -> Split:
    root = Path(root)
    spec, _ = read_scene_spec(root)
    directory = root / split
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory} does not exist")
    indices = sorted(int(p.name.split("_")[0]) for p in directory.glob("*_rgb.ppm"))
    samples = [read_sample(directory, i) for i in indices]
    return stack(samples, indices, max_disparity or spec.max_disparity)
