"""One-pass evaluation: success curve / AUC, precision at 20 px, speed statistics."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .errors import DataError
from .geometry import BBox, center_error, iou

__all__ = [
    "THRESHOLDS",
    "PRECISION_PX",
    "EvalReport",
    "success_curve",
    "success_auc",
    "precision_at",
    "build_report",
    "one_pass_eval",
    "OracleTracker",
    "StaticTracker",
    "iou",
]

THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_PX = 20.0


class TrackerLike(Protocol):
    def init(self, frame, box: BBox) -> None: ...

    def update(self, frame): ...


def success_curve(ious, thresholds: np.ndarray = THRESHOLDS) -> np.ndarray:
    """Fraction of frames whose IoU reaches each threshold (IoU >= t)."""
    v = np.asarray(ious, dtype=np.float64)
    if v.size == 0:
        return np.zeros(len(thresholds))
    return (v[None, :] >= thresholds[:, None]).mean(axis=1)


def success_auc(curve: np.ndarray, thresholds: np.ndarray = THRESHOLDS) -> float:
    """Trapezoid area under the curve, normalized by the threshold span."""
    span = thresholds[-1] - thresholds[0]
    return float(np.trapezoid(curve, thresholds) / span)


def precision_at(errors, px: float = PRECISION_PX) -> float:
    e = np.asarray(errors, dtype=np.float64)
    return float((e <= px).mean()) if e.size else 0.0


@dataclass
class EvalReport:
    thresholds: np.ndarray
    success: np.ndarray
    auc: float
    precision: float
    ious: list[float]
    center_errors: list[float]
    fps: dict[str, float] = field(default_factory=dict)
    failed: bool = False
    error: str = ""

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.ious)) if self.ious else 0.0

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "precision_20px": self.precision,
            "mean_iou": self.mean_iou,
            "frames_evaluated": len(self.ious),
            "success_curve": [[float(t), float(s)] for t, s in zip(self.thresholds, self.success)],
            "ious": [float(x) for x in self.ious],
            "center_errors": [float(x) for x in self.center_errors],
            "fps": self.fps,
            "failed": self.failed,
            "error": self.error,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        """Plot data: threshold,success pairs."""
        return "threshold,success\n" + "".join(f"{t:.2f},{s:.6f}\n" for t, s in zip(self.thresholds, self.success))

    def to_table(self) -> str:
        rows = [
            ("frames", f"{len(self.ious)}"),
            ("success AUC", f"{self.auc:.4f}"),
            ("precision@20px", f"{self.precision:.4f}"),
            ("mean IoU", f"{self.mean_iou:.4f}"),
        ]
        rows += [(k, f"{v:.2f}") for k, v in self.fps.items()]
        if self.failed:
            rows.append(("FAILED", self.error))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def _fps_stats(latencies: list[float]) -> dict[str, float]:
    if not latencies:
        return {}
    lat = np.asarray(latencies)
    return {
        "fps_mean": float(1.0 / lat.mean()),
        "fps_median": float(1.0 / np.median(lat)),
        "fps_p95": float(1.0 / np.percentile(lat, 95)),  # fps at the 95th-percentile latency
    }


def build_report(pred: Sequence[BBox], gt: Sequence[BBox], latencies: list[float] | None = None, failed: bool = False, error: str = "") -> EvalReport:
    """Metrics over paired predictions and ground truth (already excluding the init frame)."""
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predictions for {len(gt)} ground-truth boxes")
    ious = [iou(p, g) for p, g in zip(pred, gt)]
    errs = [center_error(p, g) for p, g in zip(pred, gt)]
    curve = success_curve(ious)
    return EvalReport(THRESHOLDS.copy(), curve, success_auc(curve), precision_at(errs), ious, errs, _fps_stats(latencies or []), failed, error)


def one_pass_eval(tracker: TrackerLike, frames, boxes: Sequence[BBox]) -> EvalReport:
    """Init on frame 0 with its ground truth, track every later frame, never re-init.

    Frame 0 is not scored. A tracker exception stops the run and returns a
    report over the frames tracked so far with ``failed`` set.
    """
    n = len(frames)
    if n != len(boxes):
        raise DataError(f"{n} frames but {len(boxes)} ground-truth boxes")
    if n < 2:
        raise DataError("one-pass evaluation needs at least two frames")
    tracker.init(frames[0], boxes[0])
    preds: list[BBox] = []
    lat: list[float] = []
    for t in range(1, n):
        frame = frames[t]
        start = time.perf_counter()
        try:
            out = tracker.update(frame)
        except Exception as exc:  # noqa: BLE001 - any tracker failure ends the pass
            return build_report(preds, boxes[1: 1 + len(preds)], lat, True, f"frame {t}: {type(exc).__name__}: {exc}")
        lat.append(time.perf_counter() - start)
        preds.append(out[0] if isinstance(out, tuple) else out)
    return build_report(preds, boxes[1:], lat)


class OracleTracker:
    """Reports the ground truth; the harness's upper bound."""

    def __init__(self, boxes: Sequence[BBox]):
        self.boxes = boxes
        self.t = 0

    def init(self, frame, box: BBox) -> None:
        self.t = 0

    def update(self, frame) -> tuple[BBox, float]:
        self.t += 1
        return self.boxes[self.t], 1.0


class StaticTracker:
    """Never moves from the initial box."""

    def init(self, frame, box: BBox) -> None:
        self.box = box

    def update(self, frame) -> tuple[BBox, float]:
        return self.box, 1.0
