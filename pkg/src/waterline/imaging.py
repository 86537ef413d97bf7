"""Pixel-level helpers shared by the detector and the scene generator."""

from __future__ import annotations

from typing import Iterable, List, Tuple

import numpy as np

Point = Tuple[int, int]


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of ``H x W [x C]`` data with pixel-centre alignment.

    Source coordinate for output index ``i`` is ``(i + 0.5) * H / out_h - 0.5``,
    clamped to the image, so equal sizes reproduce the input exactly.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    if img.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def window_origin(center: Point, r: int) -> Point:
    cx, cy = center
    return cx - r // 2, cy - r // 2


def extract_patch(frame: np.ndarray, center: Point, r: int, size: int = 64) -> np.ndarray:
    """Crop the ``r x r`` window at ``center`` and return a ``3 x size x size`` tensor in [0, 1]."""
    h, w = frame.shape[:2]
    ox, oy = window_origin(center, r)
    if ox < 0 or oy < 0 or ox + r > w or oy + r > h:
        raise ValueError(f"window of side {r} at centre {center} leaves the {w}x{h} frame")
    crop = frame[oy:oy + r, ox:ox + r]
    if crop.ndim == 2:
        crop = np.repeat(crop[:, :, None], 3, axis=2)
    scale = 65535.0 if frame.dtype == np.uint16 else 255.0
    patch = resize_bilinear(crop, size, size) / scale
    return np.ascontiguousarray(patch.transpose(2, 0, 1))


def bresenham(p0: Point, p1: Point) -> List[Point]:
    """Integer line from ``p0`` to ``p1`` inclusive, 8-connected."""
    x0, y0 = p0
    x1, y1 = p1
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    out = []
    while True:
        out.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return out
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def polyline_pixels(points: Iterable[Point]) -> List[Point]:
    """Union of Bresenham segments through consecutive points, in drawing order, deduplicated."""
    pts = list(points)
    seen = set()
    out = []
    for i, p in enumerate(pts):
        seg = [p] if i == 0 else bresenham(pts[i - 1], p)
        for q in seg:
            if q not in seen:
                seen.add(q)
                out.append(q)
    return out


BLUE = (0, 0, 255)
RED = (255, 0, 0)


def draw_pixels(img: np.ndarray, pixels: Iterable[Point], color) -> None:
    h, w = img.shape[:2]
    for x, y in pixels:
        if 0 <= x < w and 0 <= y < h:
            img[y, x] = color
