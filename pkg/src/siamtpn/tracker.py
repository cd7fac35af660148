"""Single-target tracking loop: template init, per-frame search, state update."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DataError
from .geometry import SEARCH_AREA_FACTOR, TEMPLATE_AREA_FACTOR, BBox, CropGeometry
from .head import PostprocessConfig, Selection, postprocess
from .model import SiamTPN
from .tensor import Tensor


def crop_and_resize(frame: np.ndarray, geom: CropGeometry) -> np.ndarray:
    """Bilinear resample of a square window to (out_res, out_res, C).

    Pixel centers sit at integer coordinates; samples falling outside the
    frame take the frame's per-channel mean.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[0] == 0 or frame.shape[1] == 0:
        raise DataError(f"empty or malformed frame of shape {frame.shape}")
    h, w, _ = frame.shape
    n = int(geom.out_res)
    ox, oy = geom.origin
    step = geom.side / n
    xs = ox + (np.arange(n) + 0.5) * step - 0.5
    ys = oy + (np.arange(n) + 0.5) * step - 0.5
    x0, y0 = np.floor(xs).astype(np.int64), np.floor(ys).astype(np.int64)
    ax, ay = (xs - x0)[None, :, None], (ys - y0)[:, None, None]
    fill = frame.mean(axis=(0, 1))

    def fetch(yi, xi):
        vals = frame[np.clip(yi, 0, h - 1)][:, np.clip(xi, 0, w - 1)]
        valid = ((yi >= 0) & (yi < h))[:, None] & ((xi >= 0) & (xi < w))[None, :]
        return np.where(valid[..., None], vals, fill)

    return (
        (1 - ay) * (1 - ax) * fetch(y0, x0)
        + (1 - ay) * ax * fetch(y0, x0 + 1)
        + ay * (1 - ax) * fetch(y0 + 1, x0)
        + ay * ax * fetch(y0 + 1, x0 + 1)
    )


def template_geometry(box: BBox, size: int) -> CropGeometry:
    return CropGeometry.around(box, TEMPLATE_AREA_FACTOR, size)


def search_geometry(box: BBox, size: int) -> CropGeometry:
    return CropGeometry.around(box, SEARCH_AREA_FACTOR, size)


@dataclass
class TrackerState:
    current: BBox
    template_fused: np.ndarray  # read-only (h4, w4, C)
    frame_index: int = 0
    last_confidence: float = 1.0
    frame_size: tuple[int, int] = (0, 0)


@dataclass
class StageTimes:
    crop: float = 0.0
    backbone: float = 0.0
    tpn: float = 0.0
    head: float = 0.0
    post: float = 0.0
    total: float = 0.0

    def stages(self) -> dict[str, float]:
        return {"backbone": self.backbone, "tpn": self.tpn, "head": self.head, "post": self.post}


MIN_BOX = 4.0


def _clamp_box(box: BBox, frame_size: tuple[int, int]) -> BBox:
    h, w = frame_size
    cx = min(max(box.cx, 0.0), float(w))
    cy = min(max(box.cy, 0.0), float(h))
    bw = min(max(box.w, MIN_BOX), float(w))
    bh = min(max(box.h, MIN_BOX), float(h))
    return BBox(cx, cy, bw, bh)


def init(model: SiamTPN, frame: np.ndarray, box: BBox) -> TrackerState:
    """Crop the template around ``box`` and cache its fused features."""
    frame = np.asarray(frame, dtype=np.float64)
    box = _clamp_box(box, frame.shape[:2])
    crop = crop_and_resize(frame, template_geometry(box, model.cfg.template_size))
    with T.no_grad():
        fused = model.features(crop).data.copy()
    fused.setflags(write=False)
    return TrackerState(box, fused, 0, 1.0, frame.shape[:2])


def update(
    model: SiamTPN,
    state: TrackerState,
    frame: np.ndarray,
    post: PostprocessConfig = PostprocessConfig(),
    times: StageTimes | None = None,
) -> Selection:
    """Track one frame; replaces ``state.current`` and returns the selection."""
    t0 = time.perf_counter()
    geom = search_geometry(state.current, model.cfg.search_size)
    crop = crop_and_resize(frame, geom)
    t1 = time.perf_counter()
    with T.no_grad():
        from .backbone import backbone_forward
        from .tpn import tpn_forward

        pyr = backbone_forward(crop, model.params.backbone)
        t2 = time.perf_counter()
        feat = tpn_forward(pyr, model.params.tpn, model.tpn_cfg)
        t3 = time.perf_counter()
        maps = model.predict(feat, Tensor(state.template_fused))
        t4 = time.perf_counter()
    sel = postprocess(maps, state.current, geom, post, model.map_geometry())
    state.current = _clamp_box(sel.box, state.frame_size or np.asarray(frame).shape[:2])
    state.frame_index += 1
    state.last_confidence = sel.confidence
    t5 = time.perf_counter()
    if times is not None:
        times.crop += t1 - t0
        times.backbone += t2 - t1
        times.tpn += t3 - t2
        times.head += t4 - t3
        times.post += t5 - t4
        times.total += t5 - t0
    return sel


def export_attention(model: SiamTPN, state: TrackerState, frame: np.ndarray, level: int = 0) -> dict[str, dict[str, np.ndarray]]:
    """Attention of the central P4 query over P3, P4 and P5 in TPN block ``level``.

    Heads are averaged; pooled weights are spread evenly over the cells of
    each pooling window, so every raw map sums to 1 on its key map's grid.
    ``normalized`` maps are min-max scaled to [0, 1] (all zeros when flat).
    """
    if model.tpn_cfg.neck != "tpn":
        raise ValueError("attention export needs the tpn neck")
    geom = search_geometry(state.current, model.cfg.search_size)
    crop = crop_and_resize(frame, geom)
    capture: dict = {}
    with T.no_grad():
        model.features(crop, capture)
    if level not in capture:
        raise ValueError(f"block {level} does not exist")
    sizes = model.pyramid_sizes(model.cfg.search_size)
    h4 = sizes[1]
    center = (h4 // 2) * h4 + h4 // 2
    raw, norm = {}, {}
    for name, weights, n, r in zip(("p3", "p4", "p5"), capture[level], sizes, model.tpn_cfg.r_cross):
        row = weights[:, center, :].mean(axis=0)
        ph = -(-n // r)
        pooled = row.reshape(ph, ph)
        counts = np.outer(np.minimum(r, n - np.arange(ph) * r), np.minimum(r, n - np.arange(ph) * r))
        full = np.repeat(np.repeat(pooled / counts, r, axis=0), r, axis=1)[:n, :n]
        raw[name] = full
        spread = full.max() - full.min()
        norm[name] = (full - full.min()) / spread if spread > 1e-12 else np.zeros_like(full)
    return {"raw": raw, "normalized": norm}


@dataclass
class Tracker:
    """Object wrapper with the ``init(frame, box)`` / ``update(frame)`` protocol."""

    model: SiamTPN
    post: PostprocessConfig = field(default_factory=PostprocessConfig)
    times: StageTimes = field(default_factory=StageTimes)
    state: TrackerState | None = None

    def init(self, frame, box: BBox) -> None:
        self.state = init(self.model, frame, box)

    def update(self, frame) -> tuple[BBox, float]:
        if self.state is None:
            raise RuntimeError("tracker used before init")
        sel = update(self.model, self.state, frame, self.post, self.times)
        return self.state.current, sel.confidence
