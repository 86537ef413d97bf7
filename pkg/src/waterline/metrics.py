"""Distance-thresholded waterline metrics.

Estimated pixels are matched against the manually placed anchors: a pixel
counts as a hit when its Euclidean distance to the nearest anchor is at most
``lam``. Undefined values (empty estimate, too few false positives for a
skewness) are reported as ``None`` rather than 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .imaging import Point, polyline_pixels

DEFAULT_LAMBDA = 10.0
RECALL_MODES = ("literal", "coverage")


@dataclass(frozen=True)
class GroundTruth:
    anchors: Tuple[Point, ...]
    pixels: Tuple[Point, ...]

    @classmethod
    def from_anchors(cls, anchors: Iterable[Point]) -> "GroundTruth":
        anchors = tuple((int(x), int(y)) for x, y in anchors)
        return cls(anchors, tuple(rasterize_ground_truth(anchors)))


def rasterize_ground_truth(anchors: Sequence[Point]) -> List[Point]:
    if len(anchors) == 0:
        raise ValueError("ground truth needs at least one anchor")
    return polyline_pixels(anchors)


def _as_points(pts) -> np.ndarray:
    return np.asarray(list(pts), dtype=np.float64).reshape(-1, 2)


def min_distances(points, targets) -> np.ndarray:
    """Distance from each point to its nearest target."""
    p, t = _as_points(points), _as_points(targets)
    if len(p) == 0:
        return np.zeros(0)
    if len(t) == 0:
        return np.full(len(p), np.inf)
    d, _ = cKDTree(t).query(p, k=1)
    return np.asarray(d, dtype=np.float64)


def match_distance(e: Point, anchors) -> float:
    return float(min_distances([e], anchors)[0])


def matched_count(estimate, anchors, lam: float) -> int:
    return int((min_distances(estimate, anchors) <= lam).sum())


def precision(estimate, anchors, lam: float = DEFAULT_LAMBDA) -> Optional[float]:
    estimate = list(estimate)
    if not estimate:
        return None
    return matched_count(estimate, anchors, lam) / len(estimate)


def recall(estimate, anchors, gt_pixels, lam: float = DEFAULT_LAMBDA,
           mode: str = "literal") -> float:
    """``literal`` divides the matched-estimate count by ``|g|`` (may exceed 1);
    ``coverage`` is the fraction of ground-truth pixels within ``lam`` of the estimate."""
    gt_pixels = list(gt_pixels)
    if not gt_pixels:
        raise ValueError("recall needs a non-empty ground-truth pixel set")
    if mode == "literal":
        return matched_count(estimate, anchors, lam) / len(gt_pixels)
    if mode == "coverage":
        return int((min_distances(gt_pixels, estimate) <= lam).sum()) / len(gt_pixels)
    raise ValueError(f"recall mode must be one of {RECALL_MODES}")


def fp_count(estimate, anchors, lam: float = DEFAULT_LAMBDA) -> Tuple[int, np.ndarray]:
    """Number of estimate pixels farther than ``lam`` from every anchor, and those distances."""
    d = min_distances(estimate, anchors)
    far = d[d > lam]
    return int(far.size), far


def irrelevance(distances) -> Optional[float]:
    """Adjusted Fisher-Pearson sample skewness G1 of the false-positive distances."""
    d = np.asarray(list(distances), dtype=np.float64)
    n = d.size
    if n < 3:
        return None
    dev = d - d.mean()
    m2 = np.mean(dev ** 2)
    if m2 <= 1e-12 * max(np.mean(d ** 2), 1e-300):
        return None
    m3 = np.mean(dev ** 3)
    return float(math.sqrt(n * (n - 1)) / (n - 2) * m3 / m2 ** 1.5)


def f1(p: Optional[float], r: Optional[float]) -> Optional[float]:
    """Harmonic mean; 0 when both are 0, undefined when either is undefined."""
    if p is None or r is None:
        return None
    if p + r == 0:
        return 0.0
    return 2 * p * r / (p + r)


def stability(samples) -> float:
    """(mean - median) / sample standard deviation; 0 when the spread is 0."""
    x = np.asarray(list(samples), dtype=np.float64)
    if x.size < 2:
        raise ValueError(f"stability needs at least 2 samples, got {x.size}")
    sd = x.std(ddof=1)
    if sd == 0 or sd <= 1e-12 * np.abs(x).max():
        return 0.0
    return float((x.mean() - np.median(x)) / sd)


@dataclass
class MetricReport:
    frame: int
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    fp: int
    irrelevance: Optional[float]
    lam: float
    n_estimate: int
    n_truth: int
    fp_distances: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    FIELDS = ("precision", "recall", "f1", "fp", "irrelevance")


def evaluate_map(estimate_pixels, truth: GroundTruth, lam: float = DEFAULT_LAMBDA,
                 frame: int = 0, recall_mode: str = "literal") -> MetricReport:
    """All per-frame metrics in one pass; component failures become ``None`` fields."""
    est = list(getattr(estimate_pixels, "pixels", estimate_pixels))
    p = precision(est, truth.anchors, lam)
    try:
        r = recall(est, truth.anchors, truth.pixels, lam, recall_mode)
    except ValueError:
        r = None
    fp, dist = fp_count(est, truth.anchors, lam)
    return MetricReport(frame, p, r, f1(p, r), fp, irrelevance(dist), lam,
                        len(est), len(truth.pixels), dist)


def stability_summary(reports: Sequence[MetricReport]) -> Dict[str, Optional[float]]:
    """Stability of each metric over the frames where it is defined."""
    out = {}
    for name in MetricReport.FIELDS:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        out[name] = stability(vals) if len(vals) >= 2 else None
    return out


# ---------------------------------------------------------------------------
# CSV interfaces

def read_anchor_csv(path) -> Dict[int, List[Point]]:
    """``frame -> anchors`` from a ``frame,x,y`` file, preserving row order."""
    out: Dict[int, List[Point]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"frame", "x", "y"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected header frame,x,y")
        for row in reader:
            out.setdefault(int(row["frame"]), []).append((int(row["x"]), int(row["y"])))
    return out


def write_anchor_csv(path, anchors: Dict[int, Sequence[Point]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "x", "y"])
        for frame in sorted(anchors):
            for x, y in anchors[frame]:
                w.writerow([frame, x, y])


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_report_csv(path, reports: Sequence[MetricReport]) -> None:
    """Per-frame rows, a blank line, then a ``metric,stability`` block."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("frame",) + MetricReport.FIELDS)
        for r in reports:
            w.writerow([r.frame] + [_fmt(getattr(r, k)) for k in MetricReport.FIELDS])
        w.writerow([])
        w.writerow(["metric", "stability"])
        for k, v in stability_summary(reports).items():
            w.writerow([k, _fmt(v)])


def read_report_csv(path):
    """Inverse of :func:`write_report_csv`: ``(rows, stability)`` with ``None`` for NA."""
    def conv(v):
        return None if v == "NA" else float(v)

    with open(path, newline="") as fh:
        lines = list(csv.reader(fh))
    split = lines.index([])
    head = lines[0]
    rows = [{k: (int(v) if k == "frame" else conv(v)) for k, v in zip(head, line)}
            for line in lines[1:split]]
    stab = {k: conv(v) for k, v in lines[split + 2:]}
    return rows, stab
