"""Procedural waterline scenes, labelled peephole patches and a geometric oracle.

Land occupies pixels with ``y < b(x)`` and water the rest, where ``b`` is the
scene's boundary function in pixel coordinates (x = column, y = row).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np

from .imaging import extract_patch

ANCHOR_SPACING = 16


@dataclass(frozen=True)
class SceneParams:
    width: int = 256
    height: int = 128
    boundary: str = "horizontal"  # horizontal | sloped | sinusoidal
    level: float = 64.0
    slope: float = 0.0
    amplitude: float = 0.0
    period: float = 128.0
    phase: float = 0.0
    land_color: Tuple[int, int, int] = (104, 120, 72)
    water_color: Tuple[int, int, int] = (48, 96, 160)
    ripple_amplitude: float = 0.0
    ripple_period: float = 6.0
    speckle: float = 0.0
    noise: float = 0.0
    margin: int = 16
    seed: int = 0

    def boundary_y(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.boundary == "horizontal":
            return np.full_like(x, float(self.level))
        if self.boundary == "sloped":
            return self.level + self.slope * (x - self.width / 2.0)
        if self.boundary == "sinusoidal":
            return self.level + self.amplitude * np.sin(2 * np.pi * x / self.period + self.phase)
        raise ValueError(f"unknown boundary model {self.boundary!r}")

    def boundary_range(self, x0: float, x1: float) -> Tuple[float, float]:
        """Exact min and max of the boundary over ``[x0, x1]``."""
        xs = [x0, x1]
        if self.boundary == "sinusoidal" and self.amplitude:
            # extrema where 2*pi*x/period + phase = pi/2 + k*pi
            w = 2 * np.pi / self.period
            k0 = math.ceil((w * x0 + self.phase - np.pi / 2) / np.pi)
            k1 = math.floor((w * x1 + self.phase - np.pi / 2) / np.pi)
            xs += [(np.pi / 2 + k * np.pi - self.phase) / w for k in range(k0, k1 + 1)]
        ys = self.boundary_y(np.array(xs))
        return float(ys.min()), float(ys.max())

    def validate(self) -> None:
        if self.width < 2 or self.height < 2:
            raise ValueError(f"degenerate scene geometry {self.width}x{self.height}")
        if self.boundary == "sinusoidal" and self.period <= 0:
            raise ValueError("sinusoidal boundary needs a positive period")
        lo, hi = self.boundary_range(0.0, self.width - 1.0)
        if lo < self.margin or hi > self.height - self.margin:
            raise ValueError(f"boundary spans rows [{lo:.1f}, {hi:.1f}], closer than "
                             f"{self.margin} px to the top/bottom of a {self.height}-row scene")


@dataclass
class SyntheticScene:
    params: SceneParams
    image: np.ndarray
    anchors: List[Tuple[int, int]]

    def boundary_y(self, x):
        return self.params.boundary_y(x)


def scene_anchors(params: SceneParams) -> List[Tuple[int, int]]:
    xs = list(range(0, params.width, ANCHOR_SPACING))
    if xs[-1] != params.width - 1:
        xs.append(params.width - 1)
    ys = np.floor(params.boundary_y(np.array(xs)) + 0.5).astype(int)
    return [(int(x), int(y)) for x, y in zip(xs, ys)]


def synth_scene(params: SceneParams) -> SyntheticScene:
    params.validate()
    rng = np.random.default_rng(params.seed)
    h, w = params.height, params.width
    yy = np.arange(h, dtype=np.float64)[:, None]
    land = yy < params.boundary_y(np.arange(w))[None, :]
    land_c = np.asarray(params.land_color, dtype=np.float64)
    water_c = np.asarray(params.water_color, dtype=np.float64)
    img = np.where(land[:, :, None], land_c, water_c)
    if params.ripple_amplitude:
        ripple = params.ripple_amplitude * np.sin(2 * np.pi * yy / params.ripple_period)
        img = img + np.where(land, 0.0, ripple)[:, :, None]
    if params.speckle:
        speck = rng.uniform(-params.speckle, params.speckle, size=(h, w, 1))
        img = img + np.where(land[:, :, None], speck, 0.0)
    if params.noise:
        img = img + rng.normal(0.0, params.noise, size=img.shape)
    img = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    return SyntheticScene(params, img, scene_anchors(params))


def random_scene_params(rng: np.random.Generator, width: int = 128, height: int = 64,
                        margin: int = 16, noise: float = 0.0, texture: bool = False,
                        boundaries: Sequence[str] = ("horizontal", "sloped", "sinusoidal"),
                        ) -> SceneParams:
    """Draw a scene with contrasting land/water colours and a gentle boundary."""
    kind = boundaries[int(rng.integers(len(boundaries)))]
    land = rng.integers(70, 200, size=3)
    land[2] = rng.integers(30, 110)
    water = rng.integers(20, 120, size=3)
    water[2] = rng.integers(140, 230)
    slope = amp = 0.0
    if kind == "sloped":
        slope = float(rng.uniform(-0.15, 0.15))
    elif kind == "sinusoidal":
        amp = float(rng.uniform(2.0, 6.0))
    spread = abs(slope) * width / 2 + amp
    level = float(rng.uniform(margin + spread, height - margin - spread))
    return SceneParams(
        width=width, height=height, boundary=kind, level=level, slope=slope, amplitude=amp,
        period=float(rng.uniform(0.75, 1.5) * width), phase=float(rng.uniform(0, 2 * np.pi)),
        land_color=tuple(int(v) for v in land), water_color=tuple(int(v) for v in water),
        ripple_amplitude=float(rng.uniform(0, 12)) if texture else 0.0,
        speckle=float(rng.uniform(0, 12)) if texture else 0.0,
        noise=noise, margin=margin, seed=int(rng.integers(2**63)))


# ---------------------------------------------------------------------------
# labelled patches

@dataclass
class PatchDataset:
    x: np.ndarray  # N x 3 x size x size
    y: np.ndarray  # N, 1 = waterline
    centers: np.ndarray  # N x 2 (cx, cy)
    scene: np.ndarray  # N, index into the scene list

    def __len__(self) -> int:
        return len(self.y)

    def concat(self, other: "PatchDataset") -> "PatchDataset":
        return PatchDataset(np.concatenate([self.x, other.x]), np.concatenate([self.y, other.y]),
                            np.concatenate([self.centers, other.centers]),
                            np.concatenate([self.scene, other.scene]))


def _column_offsets(params: SceneParams, cx: int, cy: int, r: int) -> np.ndarray:
    ox = cx - r // 2
    return params.boundary_y(np.arange(ox, ox + r)) - cy


def classify_window(params: SceneParams, cx: int, cy: int, r: int, s: int,
                    hard_margin: float = 2.0) -> str:
    """Label a window as ``positive``, ``negative``, ``hard`` (boundary in the
    outer ring only) or ``ambiguous`` from the boundary at every window column."""
    d = np.abs(_column_offsets(params, cx, cy, r))
    if np.all(d <= s / 2):
        return "positive"
    if np.all(d > r / 2):
        return "negative"
    if np.all((d >= s / 2 + hard_margin) & (d <= r / 2 - 1)):
        return "hard"
    return "ambiguous"


def synth_patch_dataset(scenes: Union[SceneParams, Sequence[SceneParams]], n_pos: int,
                        n_neg: int, r: int, s: int, size: int = 64, seed: int = 0,
                        n_hard: int = 0, hard_margin: float = 2.0,
                        max_tries: int = 1000) -> PatchDataset:
    """Sample peephole-layout patches.

    Positives keep the boundary inside the central ``s``-row band across the
    whole window; negatives have no boundary anywhere in the window. ``n_hard``
    extra negatives show the boundary only outside the band.
    """
    if n_pos < 0 or n_neg < 0 or n_hard < 0:
        raise ValueError("sample counts must be non-negative")
    if not r > s >= 1:
        raise ValueError(f"need r > s >= 1, got r={r}, s={s}")
    if isinstance(scenes, SceneParams):
        scenes = [scenes]
    rendered = [synth_scene(p) for p in scenes]
    rng = np.random.default_rng(seed)
    want = {"positive": n_pos, "negative": n_neg, "hard": n_hard}
    got = {k: [] for k in want}
    for label, n in want.items():
        tries = 0
        while len(got[label]) < n:
            tries += 1
            if tries > max_tries * max(n, 1):
                raise ValueError(f"only found {len(got[label])} of {n} {label} windows "
                                 f"after {tries - 1} tries")
            k = int(rng.integers(len(rendered)))
            p = rendered[k].params
            if p.width < r or p.height < r:
                raise ValueError(f"scene {p.width}x{p.height} smaller than window {r}")
            cx = int(rng.integers(0, p.width - r + 1)) + r // 2
            if label == "positive":
                base = int(np.floor(p.boundary_y(cx) + 0.5))
                cy = base + int(rng.integers(-(s // 2), s // 2 + 1))
            elif label == "hard":
                base = int(np.floor(p.boundary_y(cx) + 0.5))
                off = int(rng.integers(int(np.ceil(s / 2 + hard_margin)), r // 2))
                cy = base + off * (1 if rng.random() < 0.5 else -1)
            else:
                cy = int(rng.integers(0, p.height - r + 1)) + r // 2
            if cy - r // 2 < 0 or cy - r // 2 + r > p.height:
                continue
            if classify_window(p, cx, cy, r, s, hard_margin) != label:
                continue
            got[label].append((k, cx, cy))
    items = ([(it, 1) for it in got["positive"]] + [(it, 0) for it in got["negative"]]
             + [(it, 0) for it in got["hard"]])
    x = np.empty((len(items), 3, size, size))
    for i, ((k, cx, cy), _) in enumerate(items):
        x[i] = extract_patch(rendered[k].image, (cx, cy), r, size)
    return PatchDataset(
        x=x, y=np.array([lab for _, lab in items], dtype=np.int64),
        centers=np.array([[cx, cy] for (_, cx, cy), _ in items], dtype=np.int64).reshape(-1, 2),
        scene=np.array([k for (k, _, _), _ in items], dtype=np.int64))


# ---------------------------------------------------------------------------
# geometric oracle

def oracle_classifier(center: Tuple[int, int], r: int, s: int, scene) -> int:
    """1 iff the boundary meets the closed ``s x s`` square centred at ``center``."""
    params = scene.params if isinstance(scene, SyntheticScene) else scene
    cx, cy = center
    lo, hi = params.boundary_range(cx - s / 2, cx + s / 2)
    return int(hi >= cy - s / 2 and lo <= cy + s / 2)


@dataclass
class OracleClassifier:
    """Window classifier backed by the scene geometry instead of pixels.

    ``scenes`` maps a frame index to its scene; detection passes the frame
    index through :class:`waterline.detector.Window`.
    """

    scenes: Sequence
    r: int
    s: int

    def __call__(self, window) -> float:
        scene = self.scenes[window.frame_index] if len(self.scenes) > 1 else self.scenes[0]
        return float(oracle_classifier((window.cx, window.cy), self.r, self.s, scene))
