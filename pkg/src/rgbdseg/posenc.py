"""Sinusoidal positional encodings over (u, v) and (u, v, disparity).

A single coordinate ``i`` in [0, 1] maps to ``C`` components; component ``c``
uses angular frequency ``pi * 2**(log2(I) * c / C)`` with sine on even ``c``
and cosine on odd ``c``. Multi-coordinate encodings are plain sums of the
per-coordinate vectors, so they add no parameters and keep the model width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


_PI_LD = np.longdouble("3.14159265358979323846264338327950288")


class DomainError(ValueError):
    """A coordinate fell outside [0, 1]."""


@dataclass(frozen=True)
class PeSpec:
    channels: int
    max_value: float

    def __post_init__(self):
        if self.channels < 2 or self.channels % 2:
            raise ValueError(f"channel count must be even and >= 2, got {self.channels}")
        if not self.max_value > 1:
            raise ValueError(f"max_value must exceed 1, got {self.max_value}")

    def frequencies(self) -> np.ndarray:
        """Angular frequency per component (radians per unit of normalized coordinate)."""
        return np.pi * self.half_turns().astype(np.float64)

    def half_turns(self) -> np.ndarray:
        """``2**(log2(I) * c / C)`` in extended precision: frequency in units of pi."""
        c = np.arange(self.channels, dtype=np.longdouble)
        return np.exp2(np.log2(np.longdouble(self.max_value)) * c / self.channels)


def _check_unit(x: np.ndarray, what: str) -> None:
    if x.size and (np.isnan(x).any() or x.min() < 0.0 or x.max() > 1.0):
        raise DomainError(f"{what} must lie in [0, 1]")


def pe1d(i, spec: PeSpec) -> np.ndarray:
    """Encode normalized coordinate(s) ``i``; output shape is ``shape(i) + (C,)``."""
    i = np.asarray(i, dtype=np.float64)
    _check_unit(i, "coordinate")
    # phase in half-turns, reduced mod 2 before scaling by pi to keep the
    # sin/cos argument small; extended precision absorbs the large products
    turns = np.fmod(i[..., None].astype(np.longdouble) * spec.half_turns(), 2)
    angle = turns * _PI_LD
    out = np.empty(angle.shape)
    out[..., 0::2] = np.sin(angle[..., 0::2])
    out[..., 1::2] = np.cos(angle[..., 1::2])
    return out


def pe2d(u, v, spec: PeSpec) -> np.ndarray:
    return pe1d(u, spec) + pe1d(v, spec)


def pe3d(u, v, d, spec: PeSpec, depth_spec: PeSpec | None = None) -> np.ndarray:
    """Sum of the three per-coordinate encodings.

    ``depth_spec`` sets the frequency scale of the disparity term; by default
    it shares ``spec``. Terms are added in sorted order per component so the
    result is bitwise symmetric under any permutation of equally-scaled inputs.
    """
    depth_spec = depth_spec or spec
    if depth_spec.channels != spec.channels:
        raise ValueError("depth encoding must match the spatial channel count")
    return sum_terms(pe1d(u, spec), pe1d(v, spec), pe1d(d, depth_spec))


def sum_terms(*terms: np.ndarray) -> np.ndarray:
    """Order-independent sum of per-coordinate encodings (sorted per component)."""
    stacked = np.stack(np.broadcast_arrays(*terms))
    stacked.sort(axis=0)
    out = stacked[0]
    for t in stacked[1:]:
        out = out + t
    return out


def pe1d_unique(i, spec: PeSpec) -> np.ndarray:
    """``pe1d`` evaluated once per distinct value of ``i``; same result, cheaper on repetitive input."""
    i = np.asarray(i, dtype=np.float64)
    vals, inverse = np.unique(i, return_inverse=True)
    return pe1d(vals, spec)[inverse.reshape(i.shape)]


@dataclass(frozen=True)
class TokenCoords:
    """Normalized per-token coordinates laid out on an ``h x w`` grid."""

    u: np.ndarray
    v: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        if not (self.u.shape == self.v.shape == self.d.shape):
            raise ValueError("u, v and d must share one grid shape")
        for name in ("u", "v", "d"):
            _check_unit(getattr(self, name), name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.u.shape

    def encode(self, spec: PeSpec, mode: str, depth_spec: PeSpec | None = None) -> np.ndarray:
        if mode == "2d":
            return pe2d(self.u, self.v, spec)
        if mode == "3d":
            return pe3d(self.u, self.v, self.d, spec, depth_spec)
        raise ValueError(f"unknown encoding mode {mode!r}")


def fill_invalid(disparity: np.ndarray) -> np.ndarray:
    """Replace zero (invalid) disparities by their nearest valid neighbour."""
    disparity = np.asarray(disparity, dtype=np.float64)
    invalid = disparity <= 0
    if not invalid.any():
        return disparity
    if invalid.all():
        return np.zeros_like(disparity)
    idx = ndimage.distance_transform_edt(invalid, return_distances=False, return_indices=True)
    return disparity[tuple(idx)]


def normalize_disparity(disparity: np.ndarray, max_disparity: float) -> np.ndarray:
    """Hole-fill raw disparity and scale it into [0, 1]."""
    return np.clip(fill_invalid(disparity) / float(max_disparity), 0.0, 1.0)


def block_mean(field: np.ndarray, factor: int) -> np.ndarray:
    """Average ``[..., H, W]`` over non-overlapping ``factor x factor`` blocks."""
    if factor == 1:
        return field
    *lead, H, W = field.shape
    if H % factor or W % factor:
        raise ValueError(f"{H}x{W} is not divisible by {factor}")
    return field.reshape(*lead, H // factor, factor, W // factor, factor).mean(axis=(-3, -1))


def grid_coords(image_h: int, image_w: int, stride: int, depth: np.ndarray | None = None) -> TokenCoords:
    """Token-centre coordinates for a grid of ``stride``-pixel cells.

    ``depth`` is a normalized per-pixel disparity map ``[..., H, W]``; it is
    block-averaged to the token grid. Without it ``d`` is zero.
    """
    h, w = image_h // stride, image_w // stride
    u = (np.arange(w) + 0.5) * stride / image_w
    v = (np.arange(h) + 0.5) * stride / image_h
    vv, uu = np.meshgrid(v, u, indexing="ij")
    if depth is None:
        d = np.zeros((h, w))
    else:
        d = block_mean(np.asarray(depth, dtype=np.float64), stride)
        uu = np.broadcast_to(uu, d.shape)
        vv = np.broadcast_to(vv, d.shape)
    return TokenCoords(uu, vv, d)


def similarity_map(target: tuple[int, int], coords: TokenCoords, spec: PeSpec, mode: str,
                   depth_spec: PeSpec | None = None) -> np.ndarray:
    """Cosine similarity between the encoding at ``target`` (row, col) and every grid cell."""
    if coords.u.size == 0:
        raise ValueError("empty coordinate grid")
    if coords.u.ndim != 2:
        raise ValueError("similarity_map expects a single 2-D grid")
    r, c = target
    h, w = coords.shape
    if not (0 <= r < h and 0 <= c < w):
        raise IndexError(f"target {target} outside {h}x{w} grid")
    enc = coords.encode(spec, mode, depth_spec)
    norm = np.linalg.norm(enc, axis=-1, keepdims=True)
    unit = enc / np.maximum(norm, 1e-300)
    sim = np.clip(unit @ unit[r, c], -1.0, 1.0)
    sim[r, c] = 1.0
    return sim


def embedding_matrix(spec: PeSpec, positions: int) -> np.ndarray:
    """``positions x C`` table of 1-D encodings over an evenly spaced grid."""
    return pe1d(np.arange(positions) / positions, spec)


def to_gray8(field: np.ndarray) -> np.ndarray:
    """Linear map of [-1, 1] onto 0..255."""
    return np.rint((np.clip(field, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
