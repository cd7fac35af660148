"""Label assignment and the weighted classification / GIoU / L1 objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import BBox, MapGeometry
from .head import BG, FG, ScoreMaps
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    cls: float = 5.0
    iou: float = 5.0
    reg: float = 2.0

    def __post_init__(self):
        if min(self.cls, self.iou, self.reg) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LabelMaps:
    cls_target: np.ndarray  # (h, w) ints, FG or BG
    reg_target: np.ndarray  # (h, w, 4), zero off the positives
    pos_mask: np.ndarray  # (h, w) bool

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.pos_mask.reshape(-1))


def assign_labels(gt: BBox, geom: MapGeometry, shrink: float = 0.5) -> LabelMaps:
    """A cell is positive iff its crop point lies in ``gt`` shrunk by ``shrink`` about its center.

    ``gt`` is in search-crop pixels. Regression targets are the exact
    distances from each positive point to the four sides of ``gt``.
    """
    x1, y1, x2, y2 = gt.corners()
    if x2 <= 0 or y2 <= 0 or x1 >= geom.extent or y1 >= geom.extent:
        raise ValueError(f"ground-truth box {gt} lies outside the {geom.extent}px crop")
    px, py = geom.points()
    hw, hh = shrink * gt.w / 2.0, shrink * gt.h / 2.0
    pos = (np.abs(px - gt.cx) <= hw) & (np.abs(py - gt.cy) <= hh)
    reg = np.stack([px - x1, py - y1, x2 - px, y2 - py], axis=-1) * pos[..., None]
    cls = np.where(pos, FG, BG)
    return LabelMaps(cls, reg, pos)


def cls_loss(logits: Tensor, labels: LabelMaps) -> Tensor:
    """Mean softmax cross-entropy over all cells."""
    flat = T.reshape(logits, (-1, 2))
    onehot = np.zeros(flat.shape)
    onehot[np.arange(flat.shape[0]), labels.cls_target.reshape(-1)] = 1.0
    return T.neg(T.mean(T.sum(T.mul(T.log_softmax(flat, axis=-1), onehot), axis=-1)))


def _positive_rows(reg: Tensor, labels: LabelMaps) -> tuple[Tensor, np.ndarray]:
    idx = labels.positives
    pred = T.index(T.reshape(reg, (-1, 4)), idx)
    target = labels.reg_target.reshape(-1, 4)[idx]
    return pred, target


def giou_loss(reg: Tensor, labels: LabelMaps) -> Tensor:
    """Mean (1 - GIoU) over positive cells, boxes expressed as l, t, r, b from the same point."""
    if not labels.pos_mask.any():
        return Tensor(0.0)
    pred, tgt = _positive_rows(reg, labels)
    d = T.relu(pred)
    l, t, r, b = (T.index(d, (slice(None), k)) for k in range(4))
    gl, gt_, gr, gb = (tgt[:, k] for k in range(4))
    area_p = T.mul(T.add(l, r), T.add(t, b))
    area_g = (gl + gr) * (gt_ + gb)
    iw = T.add(T.minimum(l, gl), T.minimum(r, gr))
    ih = T.add(T.minimum(t, gt_), T.minimum(b, gb))
    inter = T.mul(iw, ih)
    union = T.sub(T.add(area_p, area_g), inter)
    ew = T.add(T.maximum(l, gl), T.maximum(r, gr))
    eh = T.add(T.maximum(t, gt_), T.maximum(b, gb))
    enclose = T.mul(ew, eh)
    g = T.sub(T.div(inter, union), T.div(T.sub(enclose, union), enclose))
    return T.mean(T.sub(1.0, g))


def l1_reg_loss(reg: Tensor, labels: LabelMaps, search_size: int = 256) -> Tensor:
    """Mean |pred - target| / search_size over the positive cells' four distances."""
    if not labels.pos_mask.any():
        return Tensor(0.0)
    pred, tgt = _positive_rows(reg, labels)
    return T.scale(T.mean(T.absolute(T.sub(pred, tgt))), 1.0 / search_size)


def total_loss(
    maps: ScoreMaps,
    labels: LabelMaps,
    weights: LossWeights = LossWeights(),
    search_size: int = 256,
) -> tuple[Tensor, dict[str, float]]:
    lc = cls_loss(maps.cls, labels)
    li = giou_loss(maps.reg, labels)
    lr = l1_reg_loss(maps.reg, labels, search_size)
    total = T.add(T.add(T.scale(lc, weights.cls), T.scale(li, weights.iou)), T.scale(lr, weights.reg))
    parts = {"cls": lc.item(), "iou": li.item(), "reg": lr.item(), "total": total.item()}
    return total, parts
