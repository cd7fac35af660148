"""Deterministic synthetic tracking sequences.

A textured rectangle moves over a smooth noisy background. Frames are
rendered on demand so long sequences stay cheap to hold.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import zoom

from .geometry import BBox, iou

MIN_TARGET = 8.0
TRAJECTORIES = ("linear", "sinusoidal")


@dataclass(frozen=True)
class SequenceSpec:
    frames: int = 100
    height: int = 240
    width: int = 320
    trajectory: str = "linear"
    speed: float = 1.5  # px/frame along the path
    target_w: float = 36.0
    target_h: float = 28.0
    size_change: float = 0.0  # relative size change from first to last frame
    texture_seed: int = 0
    distractor: bool = False
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("a sequence needs at least one frame")
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"trajectory must be one of {TRAJECTORIES}")
        end = 1.0 + self.size_change
        for base in (self.target_w, self.target_h):
            if min(base, base * end) < MIN_TARGET:
                raise ValueError(f"target must stay at least {MIN_TARGET:g} px in each dimension")
        if max(self.target_w, self.target_w * end) * 1.5 > self.width or max(self.target_h, self.target_h * end) * 1.5 > self.height:
            raise ValueError("target too large for the frame")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


def _reflect(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Bounce ``x`` between ``lo`` and ``hi``."""
    span = hi - lo
    if span <= 0:
        return np.full_like(x, (lo + hi) / 2.0)
    y = np.mod(x - lo, 2 * span)
    return lo + np.where(y > span, 2 * span - y, y)


class Texture:
    """Smooth random color pattern defined on the unit square."""

    def __init__(self, seed: int):
        rng = np.random.default_rng(seed)
        hue = rng.uniform(0, 1)
        self.base = np.clip(0.5 + 0.45 * np.cos(2 * np.pi * (hue + np.array([0.0, 1 / 3, 2 / 3]))), 0.05, 0.95)
        self.freqs = rng.uniform(1.0, 3.5, size=(3, 2))
        self.phase = rng.uniform(0, 2 * np.pi, size=3)
        self.amp = rng.uniform(0.15, 0.3, size=(3, 3))

    def __call__(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        out = np.broadcast_to(self.base, u.shape + (3,)).copy()
        for k in range(3):
            wave = np.sin(2 * np.pi * (self.freqs[k, 0] * u + self.freqs[k, 1] * v) + self.phase[k])
            out += wave[..., None] * self.amp[k]
        border = (np.minimum(np.minimum(u, 1 - u), np.minimum(v, 1 - v)) < 0.08)[..., None]
        return np.clip(np.where(border, 0.1, out), 0.0, 1.0)


class SyntheticSequence:
    """Lazily rendered frames plus exact ground-truth boxes."""

    def __init__(self, spec: SequenceSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        n = spec.frames
        t = np.arange(n, dtype=np.float64)
        grow = 1.0 + spec.size_change * (t / max(n - 1, 1))
        ws, hs = spec.target_w * grow, spec.target_h * grow
        lo_x, hi_x = ws.max() / 2 + 2, spec.width - ws.max() / 2 - 2
        lo_y, hi_y = hs.max() / 2 + 2, spec.height - hs.max() / 2 - 2
        start = np.array([rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)])
        angle = rng.uniform(0, 2 * np.pi)
        if spec.trajectory == "linear":
            cx = _reflect(start[0] + spec.speed * math.cos(angle) * t, lo_x, hi_x)
            cy = _reflect(start[1] + spec.speed * math.sin(angle) * t, lo_y, hi_y)
        else:
            ax, ay = (hi_x - lo_x) / 2.0, (hi_y - lo_y) / 2.0
            period = max(2 * np.pi * max(ax, ay) / max(spec.speed, 1e-6), 8.0)
            cx = (lo_x + hi_x) / 2.0 + ax * np.sin(2 * np.pi * t / period + angle)
            cy = (lo_y + hi_y) / 2.0 + ay * np.sin(2 * np.pi * t / (1.37 * period) + 2 * angle)
        self.boxes = [BBox(float(x), float(y), float(w), float(h)) for x, y, w, h in zip(cx, cy, ws, hs)]
        self.distractors: list[BBox | None] = [None] * n
        if spec.distractor:
            for i, b in enumerate(self.boxes):
                d = BBox(spec.width - b.cx, spec.height - b.cy, b.w, b.h)
                self.distractors[i] = d if iou(d, b) <= 0.1 else None
        coarse = rng.uniform(0.3, 0.7, size=(spec.height // 24 + 2, spec.width // 24 + 2, 3))
        bg = zoom(coarse, (spec.height / coarse.shape[0], spec.width / coarse.shape[1], 1), order=1)
        self._background = bg[: spec.height, : spec.width]
        self._texture = Texture(spec.texture_seed)

    def __len__(self) -> int:
        return self.spec.frames

    def _paint(self, img: np.ndarray, box: BBox) -> None:
        x1, y1, x2, y2 = box.corners()
        c0, c1 = max(0, math.ceil(x1 - 0.5)), min(img.shape[1], math.ceil(x2 - 0.5))
        r0, r1 = max(0, math.ceil(y1 - 0.5)), min(img.shape[0], math.ceil(y2 - 0.5))
        if c1 <= c0 or r1 <= r0:
            return
        u = (np.arange(c0, c1) + 0.5 - x1) / box.w
        v = (np.arange(r0, r1) + 0.5 - y1) / box.h
        uu, vv = np.meshgrid(u, v)
        img[r0:r1, c0:c1] = self._texture(uu, vv)

    def __getitem__(self, t: int) -> np.ndarray:
        if not -len(self) <= t < len(self):
            raise IndexError(t)
        t = t % len(self)
        img = self._background.copy()
        if self.distractors[t] is not None:
            self._paint(img, self.distractors[t])
        self._paint(img, self.boxes[t])
        if self.spec.noise > 0:
            noise_rng = np.random.default_rng([self.spec.seed, t])
            img = img + noise_rng.normal(0.0, self.spec.noise, img.shape)
        return np.clip(img, 0.0, 1.0)


def synth_sequence(spec: SequenceSpec) -> SyntheticSequence:
    return SyntheticSequence(spec)


def easy_spec(seed: int = 1000, frames: int = 100) -> SequenceSpec:
    """Linear motion, constant size, no distractor."""
    return SequenceSpec(frames=frames, trajectory="linear", speed=1.5, seed=seed, texture_seed=seed)
