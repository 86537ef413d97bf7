"""Sliding-peephole waterline detection over a frame stream."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import pnm
from .imaging import BLUE, RED, Point, bresenham, draw_pixels, extract_patch

MARK_MODES = ("polyline", "centers")


@dataclass(frozen=True)
class DetectorConfig:
    r: int = 60
    s: int = 30
    h: int = 30
    f: int = 1
    mark_mode: str = "polyline"
    threshold: float = 0.5
    patch_size: int = 64

    def __post_init__(self):
        if not self.r > self.s >= 1:
            raise ValueError(f"need r > s >= 1, got r={self.r}, s={self.s}")
        if not 1 <= self.h <= self.r:
            raise ValueError(f"need 1 <= h <= r, got h={self.h}")
        if self.f < 1:
            raise ValueError(f"sampling rate must be >= 1, got {self.f}")
        if self.mark_mode not in MARK_MODES:
            raise ValueError(f"mark mode must be one of {MARK_MODES}")


@dataclass(frozen=True)
class Window:
    """One peephole placement handed to a classifier."""

    frame: np.ndarray
    cx: int
    cy: int
    r: int
    frame_index: int = 0

    def patch(self, size: int = 64) -> np.ndarray:
        return extract_patch(self.frame, (self.cx, self.cy), self.r, size)


Classifier = Callable[[Window], float]


class DetectionError(RuntimeError):
    pass


@dataclass
class WaterlineMap:
    frame_index: int
    marks: List[Point]
    vertices: List[Point]
    pixels: List[Point]
    shape: Tuple[int, int] = (0, 0)

    def render(self, frame: np.ndarray, truth: Optional[Iterable[Point]] = None) -> np.ndarray:
        """Copy of ``frame`` with the estimate in blue and optional ground truth in red."""
        out = np.array(frame, dtype=np.uint8, copy=True)
        if truth is not None:
            draw_pixels(out, truth, RED)
        draw_pixels(out, self.pixels, BLUE)
        return out


def sample_frames(frames: Sequence, f: int) -> List[Tuple[int, object]]:
    """Every ``f``-th frame starting at index 0, as ``(index, frame)`` pairs."""
    if f < 1:
        raise ValueError(f"sampling rate must be >= 1, got {f}")
    return [(i, frames[i]) for i in range(0, len(frames), f)]


def _origins(size: int, r: int, h: int) -> List[int]:
    out = list(range(0, size - r + 1, h))
    if out[-1] != size - r:
        out.append(size - r)
    return out


def scan_positions(height: int, width: int, r: int, h: int) -> List[Point]:
    """Row-major window centres; the last row/column is clamped to the border."""
    if r > min(height, width):
        raise ValueError(f"peephole side {r} exceeds frame {width}x{height}")
    if h < 1:
        raise ValueError(f"stride must be >= 1, got {h}")
    return [(ox + r // 2, oy + r // 2)
            for oy in _origins(height, r, h) for ox in _origins(width, r, h)]


def scan_frame(frame: np.ndarray, config: DetectorConfig, classifier: Classifier,
               frame_index: int = 0, workers: int = 1) -> List[Point]:
    """Centres of every window whose waterline probability reaches the threshold."""
    h, w = frame.shape[:2]
    positions = scan_positions(h, w, config.r, config.h)

    def probe(c):
        try:
            p = float(classifier(Window(frame, c[0], c[1], config.r, frame_index)))
        except Exception as exc:
            raise DetectionError(f"classifier failed at frame {frame_index}, centre {c}: "
                                 f"{exc}") from exc
        if not 0.0 <= p <= 1.0:
            raise DetectionError(f"classifier returned {p} outside [0, 1] at frame "
                                 f"{frame_index}, centre {c}")
        return p

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            probs = list(pool.map(probe, positions))
    else:
        probs = [probe(c) for c in positions]
    return sorted(c for c, p in zip(positions, probs) if p >= config.threshold)


def select_column_marks(marks: Iterable[Point]) -> List[Point]:
    """One mark per distinct x: topmost first, then the one nearest the previous y."""
    columns = {}
    for x, y in marks:
        columns.setdefault(x, []).append(y)
    chosen = []
    prev = None
    for x in sorted(columns):
        ys = sorted(columns[x])
        y = ys[0] if prev is None else min(ys, key=lambda v: (abs(v - prev), v))
        chosen.append((x, y))
        prev = y
    return chosen


def connect_marks(marks: Iterable[Point], mode: str = "polyline", frame_index: int = 0,
                  shape: Tuple[int, int] = (0, 0)) -> WaterlineMap:
    marks = sorted(set(marks))
    if mode == "centers":
        return WaterlineMap(frame_index, marks, [], list(marks), shape)
    if mode != "polyline":
        raise ValueError(f"mark mode must be one of {MARK_MODES}")
    vertices = select_column_marks(marks)
    pixels: List[Point] = []
    seen: Set[Point] = set()
    segs = [[vertices[0]]] if vertices else []
    segs += [bresenham(a, b) for a, b in zip(vertices, vertices[1:])]
    for seg in segs + [marks]:
        for p in seg:
            if p not in seen:
                seen.add(p)
                pixels.append(p)
    return WaterlineMap(frame_index, marks, vertices, pixels, shape)


def detect_stream(frames: Sequence[np.ndarray], config: DetectorConfig, classifier: Classifier,
                  workers: int = 1) -> List[WaterlineMap]:
    sampled = sample_frames(frames, config.f)
    if sampled:
        shape0 = sampled[0][1].shape[:2]
        for i, fr in sampled:
            if fr.shape[:2] != shape0:
                raise DetectionError(f"frame {i} is {fr.shape[:2]}, stream is {shape0}")
    maps = []
    for i, frame in sampled:
        marks = scan_frame(frame, config, classifier, i, workers)
        maps.append(connect_marks(marks, config.mark_mode, i, frame.shape[:2]))
    return maps


class NetworkClassifier:
    """Waterline-class probability from a detector network."""

    def __init__(self, network, positive_class: int = 1):
        self.network = network
        self.size = network.arch.input_shape[1]
        self.positive_class = positive_class

    def __call__(self, window: Window) -> float:
        return float(self.network.forward(window.patch(self.size))[self.positive_class])


# ---------------------------------------------------------------------------
# file interfaces

def read_frame_dir(path) -> List[Tuple[str, np.ndarray]]:
    """Load ``*.ppm`` / ``*.pgm`` files from a directory in lexical order."""
    files = sorted(p for p in Path(path).iterdir()
                   if p.suffix.lower() in (".ppm", ".pgm", ".pnm"))
    return [(p.name, pnm.read(p)) for p in files]


def write_marks_csv(path, maps: Sequence[WaterlineMap]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["frame", "cx", "cy"])
        for m in maps:
            for x, y in m.marks:
                out.writerow([m.frame_index, x, y])


def read_marks_csv(path) -> dict:
    """``frame -> list of (x, y)`` from a ``frame,cx,cy`` file."""
    out: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(int(row["frame"]), []).append((int(row["cx"]), int(row["cy"])))
    return out
