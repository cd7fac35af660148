"""Depth-wise correlation, the anchor-free prediction head and score postprocessing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import NumericError, ShapeError
from .geometry import BBox, CropGeometry, MapGeometry
from .nn import ConvParams, NormParams
from .tensor import Tensor, op_tag

FG, BG = 0, 1


@dataclass
class ScoreMaps:
    """cls: (h, w, 2) logits, channel 0 = foreground. reg: (h, w, 4) l, t, r, b in crop pixels."""

    cls: Tensor
    reg: Tensor


@dataclass
class ConvBlock:
    conv: ConvParams
    norm: NormParams


@dataclass
class HeadParams:
    cls_blocks: list[ConvBlock]
    cls_out: ConvParams
    reg_blocks: list[ConvBlock]
    reg_out: ConvParams

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, depth: int = 3, reg_bias: float = 0.125) -> "HeadParams":
        def branch():
            return [ConvBlock(ConvParams.init(rng, 3, channels, channels, padding=1), NormParams.init(channels)) for _ in range(depth)]

        cls_blocks = branch()
        cls_out = ConvParams.init(rng, 1, channels, 2)
        reg_blocks = branch()
        reg_out = ConvParams.init(rng, 1, channels, 4)
        # start regression at positive distances so the ReLU decode is active
        reg_out.b.data = np.full(4, reg_bias)
        return cls(cls_blocks, cls_out, reg_blocks, reg_out)


@dataclass(frozen=True)
class PostprocessConfig:
    window_influence: float = 0.45
    penalty_k: float = 0.04
    size_lr: float = 0.33

    def __post_init__(self):
        if not 0.0 <= self.window_influence <= 1.0:
            raise ValueError("window_influence must lie in [0, 1]")
        if self.penalty_k < 0:
            raise ValueError("penalty_k must be >= 0")
        if not 0.0 <= self.size_lr <= 1.0:
            raise ValueError("size_lr must lie in [0, 1]")


def depthwise_xcorr(search: Tensor, template: Tensor) -> Tensor:
    """Per-channel valid correlation: (hs, ws, C) * (ht, wt, C) -> (hs-ht+1, ws-wt+1, C)."""
    if search.ndim != 3 or template.ndim != 3 or search.shape[2] != template.shape[2]:
        raise ShapeError(f"xcorr needs matching channels, got {search.shape} and {template.shape}")
    hs, ws, c = search.shape
    ht, wt, _ = template.shape
    if ht > hs or wt > ws:
        raise ShapeError(f"template {template.shape[:2]} larger than search {search.shape[:2]}")
    oh, ow = hs - ht + 1, ws - wt + 1
    with op_tag("xcorr"):
        T.count_mul_adds(oh * ow * c * ht * wt)
    sd, td = search.data, template.data
    win = sliding_window_view(sd, (ht, wt), axis=(0, 1))  # (oh, ow, c, ht, wt)
    out = np.einsum("ijcab,abc->ijc", win, td, optimize=True)

    def grad_fn(g):
        gt = np.einsum("ijcab,ijc->abc", win, g, optimize=True)
        gs = np.zeros(sd.shape)
        for a in range(ht):
            for b in range(wt):
                gs[a: a + oh, b: b + ow] += g * td[a, b]
        return gs, gt

    return T.record(out, (search, template), grad_fn, "depthwise_xcorr")


def _branch(x: Tensor, blocks: list[ConvBlock], out: ConvParams) -> Tensor:
    for blk in blocks:
        x = T.conv2d(x, blk.conv.w, blk.conv.b, padding=blk.conv.padding)
        x = T.relu(T.layer_norm(x, blk.norm.gamma, blk.norm.beta))
    return T.conv2d(x, out.w, out.b)


def head_forward(corr: Tensor, params: HeadParams, search_size: int = 256) -> ScoreMaps:
    """Correlation map -> classification logits and l/t/r/b distances (crop pixels).

    The regression branch predicts distances as a fraction of the search
    crop; they are scaled to pixels here and clamped at zero only on decode.
    """
    if corr.shape[2] != params.cls_blocks[0].conv.w.shape[2]:
        raise ShapeError(f"correlation map has {corr.shape[2]} channels, head expects {params.cls_blocks[0].conv.w.shape[2]}")
    with op_tag("head"):
        cls = _branch(corr, params.cls_blocks, params.cls_out)
        reg = T.scale(_branch(corr, params.reg_blocks, params.reg_out), float(search_size))
    return ScoreMaps(cls, reg)


def hanning1d(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("window length must be >= 1")
    if n == 1:
        return np.ones(1)
    i = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * i / (n - 1))


def hanning2d(w: int, h: int) -> np.ndarray:
    """(h, w) outer product of 1-d Hann windows."""
    return np.outer(hanning1d(h), hanning1d(w))


def foreground_prob(cls_logits: np.ndarray) -> np.ndarray:
    z = cls_logits - cls_logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e[..., FG] / e.sum(axis=-1)


def decode_boxes(reg: np.ndarray, geom: MapGeometry, clamp: bool = True) -> np.ndarray:
    """(h, w, 4) distances -> (h, w, 4) corners x1, y1, x2, y2 in crop pixels."""
    d = np.maximum(reg, 0.0)
    px, py = geom.points()
    boxes = np.stack([px - d[..., 0], py - d[..., 1], px + d[..., 2], py + d[..., 3]], axis=-1)
    if clamp:
        boxes = np.clip(boxes, 0.0, float(geom.extent))
    return boxes


def _change(r: np.ndarray) -> np.ndarray:
    return np.maximum(r, 1.0 / r)


def _padded_size(w, h):
    pad = (w + h) * 0.5
    return np.sqrt((w + pad) * (h + pad))


MIN_SIDE = 1e-3


@dataclass
class Selection:
    box: BBox
    confidence: float
    cell: tuple[int, int]
    score: np.ndarray


def postprocess(
    maps: ScoreMaps,
    previous: BBox,
    crop: CropGeometry,
    cfg: PostprocessConfig,
    geom: MapGeometry | None = None,
) -> Selection:
    """Pick the best cell and decode its box into image coordinates.

    score = (1 - a) * penalty * fg + a * hann, penalty = exp(-k (r_c s_c - 1))
    where r_c and s_c are the max-ratio changes of aspect and padded size
    against ``previous``. The new size is lr-smoothed with ``previous``.
    """
    cls = maps.cls.data if isinstance(maps.cls, Tensor) else np.asarray(maps.cls)
    reg = maps.reg.data if isinstance(maps.reg, Tensor) else np.asarray(maps.reg)
    if not (np.isfinite(cls).all() and np.isfinite(reg).all()):
        raise NumericError("score maps contain non-finite values")
    rows, cols = cls.shape[:2]
    geom = geom or MapGeometry(rows, cols, 16, crop.out_res)
    fg = foreground_prob(cls)
    boxes = decode_boxes(reg, geom)
    w = np.maximum(boxes[..., 2] - boxes[..., 0], MIN_SIDE) / crop.scale
    h = np.maximum(boxes[..., 3] - boxes[..., 1], MIN_SIDE) / crop.scale
    s_c = _change(_padded_size(w, h) / _padded_size(previous.w, previous.h))
    r_c = _change((w / h) / (previous.w / previous.h))
    penalty = np.exp(-cfg.penalty_k * (r_c * s_c - 1.0))
    a = cfg.window_influence
    score = (1.0 - a) * penalty * fg + a * hanning2d(cols, rows)
    if not np.isfinite(score).all():
        raise NumericError("non-finite selection score")
    i, j = np.unravel_index(int(np.argmax(score)), score.shape)
    x1, y1, x2, y2 = boxes[i, j]
    cx, cy = crop.to_image((x1 + x2) / 2.0, (y1 + y2) / 2.0)
    lr = cfg.size_lr
    new_w = lr * w[i, j] + (1.0 - lr) * previous.w
    new_h = lr * h[i, j] + (1.0 - lr) * previous.h
    return Selection(BBox(cx, cy, new_w, new_h), float(fg[i, j]), (int(i), int(j)), score)


def map_geometry(rows: int, cols: int, search_size: int, stride: float = 16) -> MapGeometry:
    return MapGeometry(rows, cols, stride, search_size)


def xcorr_flops(search_hw, template_hw, channels: int) -> int:
    oh = search_hw[0] - template_hw[0] + 1
    ow = search_hw[1] - template_hw[1] + 1
    return oh * ow * channels * template_hw[0] * template_hw[1]


def head_flops(rows: int, cols: int, channels: int, depth: int = 3) -> int:
    per_branch = depth * rows * cols * channels * channels * 9
    return 2 * per_branch + rows * cols * channels * (2 + 4)

