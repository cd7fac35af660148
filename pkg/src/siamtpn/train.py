"""Toy training: synthetic template/search pairs, single-pair overfit, small multi-pair runs."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import frozen_names
from .errors import NumericError
from .geometry import BBox, CropGeometry, iou
from .head import FG, decode_boxes
from .losses import LabelMaps, LossWeights, assign_labels, total_loss
from .model import SiamTPN
from .optim import AdamW, cosine_lr
from .synthetic import SequenceSpec, SyntheticSequence
from .tracker import crop_and_resize, search_geometry, template_geometry

CENTER_JITTER = 0.08  # fraction of the search side
SCALE_JITTER = (0.9, 1.1)


@dataclass
class TrainingPair:
    template: np.ndarray  # (template_size, template_size, 3)
    search: np.ndarray  # (search_size, search_size, 3)
    gt: BBox  # search-crop pixels


def make_pair(seed: int, search_size: int = 256, template_size: int = 80, frames: int = 30) -> TrainingPair:
    """Template from frame 0 and a jittered search crop from a later frame of a random sequence."""
    rng = np.random.default_rng(seed)
    spec = SequenceSpec(
        frames=frames,
        target_w=float(rng.uniform(24, 48)),
        target_h=float(rng.uniform(24, 48)),
        trajectory=str(rng.choice(["linear", "sinusoidal"])),
        speed=float(rng.uniform(0.5, 2.5)),
        seed=seed,
        texture_seed=seed,
    )
    seq = SyntheticSequence(spec)
    t1 = int(rng.integers(1, frames))
    template = crop_and_resize(seq[0], template_geometry(seq.boxes[0], template_size))
    base = search_geometry(seq.boxes[t1], search_size)
    jx, jy = rng.uniform(-CENTER_JITTER, CENTER_JITTER, size=2) * base.side
    side = base.side * rng.uniform(*SCALE_JITTER)
    geom = CropGeometry(base.cx + jx, base.cy + jy, side, search_size)
    search = crop_and_resize(seq[t1], geom)
    return TrainingPair(template, search, geom.box_to_crop(seq.boxes[t1]))


def trainable_parameters(model: SiamTPN) -> dict:
    """Every parameter except the frozen first stem layer."""
    frozen = set(frozen_names(model.params.backbone, "backbone"))
    return {k: v for k, v in model.named_parameters().items() if k not in frozen}


def top_box(maps, model: SiamTPN) -> BBox:
    """Decoded box (crop pixels) at the most confident foreground cell."""
    cls = maps.cls.data
    fg = cls[..., FG] - np.logaddexp(cls[..., 0], cls[..., 1])
    i, j = np.unravel_index(int(np.argmax(fg)), fg.shape)
    x1, y1, x2, y2 = decode_boxes(maps.reg.data, model.map_geometry())[i, j]
    return BBox.from_corners(x1, y1, max(x2, x1 + 1e-3), max(y2, y1 + 1e-3))


def _labels(model: SiamTPN, pair: TrainingPair) -> LabelMaps:
    return assign_labels(pair.gt, model.map_geometry())


def _step(model: SiamTPN, opt: AdamW, pair: TrainingPair, labels: LabelMaps, weights: LossWeights):
    opt.zero_grad()
    maps = model.forward(pair.template, pair.search)
    loss, parts = total_loss(maps, labels, weights, model.cfg.search_size)
    if not np.isfinite(parts["total"]):
        raise NumericError("training diverged: non-finite loss")
    T.backward(loss)
    opt.step()
    return parts


def evaluate_pair(model: SiamTPN, pair: TrainingPair, weights: LossWeights = LossWeights()) -> tuple[float, float]:
    """(total loss, IoU of the top decoded box vs gt) without touching gradients."""
    with T.no_grad():
        maps = model.forward(pair.template, pair.search)
        _, parts = total_loss(maps, _labels(model, pair), weights, model.cfg.search_size)
    return parts["total"], iou(top_box(maps, model), pair.gt)


@dataclass
class OverfitResult:
    trace: list[float]
    final_loss: float
    final_iou: float
    parts: dict = field(default_factory=dict)


def overfit_pair(
    model: SiamTPN,
    pair: TrainingPair,
    steps: int,
    lr: float = 1e-3,
    weights: LossWeights = LossWeights(),
    weight_decay: float = 1e-4,
    decay: bool = True,
) -> OverfitResult:
    """Train on a single pair; ``trace[k]`` is the loss before update k.

    The learning rate starts at ``lr`` and follows a cosine decay to 1% of
    it over ``steps`` unless ``decay`` is off.

    With ``steps=0`` the trace is empty and the final numbers describe the
    untouched model.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    labels = _labels(model, pair)
    opt = AdamW(trainable_parameters(model), lr=lr, weight_decay=weight_decay)
    trace = []
    parts: dict = {}
    for k in range(steps):
        if decay:
            opt.lr = cosine_lr(k, steps, lr, lr * 0.01)
        parts = _step(model, opt, pair, labels, weights)
        trace.append(parts["total"])
    final_loss, final_iou = evaluate_pair(model, pair, weights)
    return OverfitResult(trace, final_loss, final_iou, parts)


def train_on_pairs(
    model: SiamTPN,
    pairs: list[TrainingPair],
    steps: int,
    lr: float = 1e-3,
    seed: int = 0,
    weights: LossWeights = LossWeights(),
    weight_decay: float = 1e-4,
    decay: bool = True,
    log=None,
) -> list[float]:
    """Shuffled single-pair steps over ``pairs``; returns the loss trace."""
    if not pairs:
        raise ValueError("need at least one training pair")
    rng = np.random.default_rng(seed)
    labels = [_labels(model, p) for p in pairs]
    opt = AdamW(trainable_parameters(model), lr=lr, weight_decay=weight_decay)
    trace = []
    order: list[int] = []
    for k in range(steps):
        if not order:
            order = list(rng.permutation(len(pairs)))
        i = order.pop()
        if decay:
            opt.lr = cosine_lr(k, steps, lr, lr * 0.01)
        parts = _step(model, opt, pairs[i], labels[i], weights)
        trace.append(parts["total"])
        if log is not None and (k + 1) % 50 == 0:
            log(f"step {k + 1}: loss {np.mean(trace[-50:]):.4f}")
    return trace
