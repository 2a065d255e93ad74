"""Binary PPM (P6) and PGM (P5) files with 8-bit samples."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def _encode(magic: bytes, arr: np.ndarray) -> bytes:
    h, w = arr.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()


def _tokens(buf: bytes, count: int, name: str) -> tuple[list[bytes], int]:
    out, pos = [], 0
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise NetpbmError(f"{name}: truncated header")
        out.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return out, pos + 1


def decode(buf: bytes, name: str = "<bytes>") -> np.ndarray:
    head, pos = _tokens(buf, 4, name)
    magic = head[0]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"{name}: unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in head[1:])
    except ValueError:
        raise NetpbmError(f"{name}: malformed header") from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise NetpbmError(f"{name}: only 8-bit rasters with positive size are supported")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    raster = buf[pos:pos + need]
    if len(raster) != need:
        raise NetpbmError(f"{name}: expected {need} raster bytes, found {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, channels)
    return arr if channels == 3 else arr[..., 0]


def write_ppm(path, rgb: np.ndarray) -> None:
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise NetpbmError(f"{path}: PPM needs an (H, W, 3) array")
    Path(path).write_bytes(_encode(b"P6", rgb))


def write_pgm(path, gray: np.ndarray) -> None:
    if gray.ndim != 2:
        raise NetpbmError(f"{path}: PGM needs an (H, W) array")
    Path(path).write_bytes(_encode(b"P5", gray))


def read_ppm(path) -> np.ndarray:
    arr = decode(Path(path).read_bytes(), str(path))
    if arr.ndim != 3:
        raise NetpbmError(f"{path}: not a PPM file")
    return arr


def read_pgm(path) -> np.ndarray:
    arr = decode(Path(path).read_bytes(), str(path))
    if arr.ndim != 2:
        raise NetpbmError(f"{path}: not a PGM file")
    return arr


def quantize(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit; round-to-nearest keeps the error within 1/510."""
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
