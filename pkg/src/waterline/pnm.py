"""Netpbm reader/writer: P2/P3 (plain) and P5/P6 (raw), 8 or 16 bit.

Images are returned as ``H x W x 3`` uint8 arrays (``uint16`` when maxval
exceeds 255); grayscale input is replicated to three channels.
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Tuple, Union

import numpy as np


class PNMError(ValueError):
    pass


def _tokens(data: bytes, count: int, pos: int) -> Tuple[List[int], int]:
    """Read ``count`` whitespace-separated integers, skipping ``#`` comments."""
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PNMError("unexpected end of header")
        try:
            out.append(int(data[start:pos]))
        except ValueError:
            raise PNMError(f"bad header token {data[start:pos]!r}") from None
    return out, pos


def decode(data: bytes) -> np.ndarray:
    magic = data[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise PNMError(f"unsupported magic {magic!r}")
    (width, height, maxval), pos = _tokens(data, 3, 2)
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise PNMError(f"bad geometry {width}x{height} maxval {maxval}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    count = width * height * channels
    dtype = np.uint8 if maxval < 256 else np.uint16
    if magic in (b"P5", b"P6"):
        pos += 1  # single whitespace byte before the raster
        size = 1 if maxval < 256 else 2
        raw = data[pos:pos + count * size]
        if len(raw) < count * size:
            raise PNMError(f"raster truncated: {len(raw)} of {count * size} bytes")
        arr = np.frombuffer(raw, dtype=np.uint8 if size == 1 else ">u2").astype(dtype)
    else:
        vals, _ = _tokens(data, count, pos)
        arr = np.asarray(vals, dtype=dtype)
    if arr.max(initial=0) > maxval:
        raise PNMError("sample exceeds maxval")
    img = arr.reshape(height, width, channels)
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def encode(img: np.ndarray, plain: bool = False) -> bytes:
    """Encode ``H x W x 3`` (PPM) or ``H x W`` (PGM) uint8 data."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise PNMError(f"only uint8 images are written, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P2" if plain else b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P3" if plain else b"P6"
    else:
        raise PNMError(f"image must be HxW or HxWx3, got {img.shape}")
    h, w = img.shape[:2]
    head = magic + b"\n%d %d\n255\n" % (w, h)
    if plain:
        rows = [" ".join(str(v) for v in row.ravel()) for row in img]
        return head + ("\n".join(rows) + "\n").encode("ascii")
    return head + np.ascontiguousarray(img).tobytes()


def read(path: Union[str, Path]) -> np.ndarray:
    return decode(Path(path).read_bytes())


def write(path: Union[str, Path], img: np.ndarray, plain: bool = False) -> None:
    Path(path).write_bytes(encode(img, plain))
