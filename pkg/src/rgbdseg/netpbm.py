"""Binary NetPBM: P6 (8-bit RGB) and P5 (8- or 16-bit grey)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def _read_header(raw: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Parse ``magic width height maxval`` and return them with the payload offset."""
    if raw[:2] != magic:
        raise NetpbmError(f"expected {magic.decode()} magic, got {raw[:2]!r}")
    pos = 2
    tokens = []
    while len(tokens) < 3:
        if pos >= len(raw):
            raise NetpbmError("header ends early")
        ch = raw[pos:pos + 1]
        if ch == b"#":
            end = raw.find(b"\n", pos)
            if end < 0:
                raise NetpbmError("unterminated comment in header")
            pos = end + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
                pos += 1
            tok = raw[start:pos]
            if not tok.isdigit():
                raise NetpbmError(f"non-numeric header field {tok!r}")
            tokens.append(int(tok))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise NetpbmError("missing whitespace after maxval")
    width, height, maxval = tokens
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise NetpbmError(f"invalid header values {tokens}")
    return width, height, maxval, pos + 1


def _decode(raw: bytes, magic: bytes, channels: int) -> tuple[np.ndarray, int]:
    width, height, maxval, offset = _read_header(raw, magic)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    need = count * dtype.itemsize
    if len(raw) - offset < need:
        raise NetpbmError(f"payload truncated: {len(raw) - offset} of {need} bytes")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    if arr.size and arr.max() > maxval:
        raise NetpbmError("sample exceeds declared maxval")
    shape = (height, width, channels) if channels > 1 else (height, width)
    native = np.uint16 if maxval > 255 else np.uint8
    return arr.reshape(shape).astype(native), maxval


def _encode(arr: np.ndarray, magic: bytes, maxval: int) -> bytes:
    height, width = arr.shape[:2]
    header = b"%s\n%d %d\n%d\n" % (magic, width, height, maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    return header + np.ascontiguousarray(arr).astype(dtype).tobytes()


def _as_samples(arr, maxval: int) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        raise NetpbmError("pass integer samples; scale floats with to_uint8 first")
    if arr.size and (arr.min() < 0 or arr.max() > maxval):
        raise NetpbmError(f"samples outside [0, {maxval}]")
    return arr


def read_ppm(path: str | Path) -> np.ndarray:
    """``[H, W, 3]`` uint8 (or uint16 when maxval > 255)."""
    return _decode(Path(path).read_bytes(), b"P6", 3)[0]


def write_ppm(path: str | Path, rgb, maxval: int = 255) -> None:
    rgb = _as_samples(rgb, maxval)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise NetpbmError(f"PPM needs [H, W, 3] samples, got {rgb.shape}")
    Path(path).write_bytes(_encode(rgb, b"P6", maxval))


def read_pgm(path: str | Path) -> np.ndarray:
    """``[H, W]`` uint8, or uint16 for 16-bit files."""
    return _decode(Path(path).read_bytes(), b"P5", 1)[0]


def read_pgm_maxval(path: str | Path) -> tuple[np.ndarray, int]:
    return _decode(Path(path).read_bytes(), b"P5", 1)


def write_pgm(path: str | Path, gray, maxval: int | None = None) -> None:
    gray = np.asarray(gray)
    if gray.ndim == 3 and gray.shape[2] == 1:
        gray = gray[..., 0]
    if gray.ndim != 2:
        raise NetpbmError(f"PGM needs [H, W] samples, got {gray.shape}")
    if maxval is None:
        maxval = 65535 if gray.dtype.itemsize > 1 and gray.size and gray.max() > 255 else 255
    gray = _as_samples(gray, maxval)
    Path(path).write_bytes(_encode(gray, b"P5", maxval))


def to_uint8(x: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit samples."""
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)
