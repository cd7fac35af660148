"""Transformer Pyramid Network: 1x1 reductions, centralized fusion blocks, stacking.

One TPN block with P4 as the only query:

    P4' = PAB(P4, P3, R=r3) + PAB(P4, P4, R=r4) + PAB(P4, P5, R=r5)
    P4' = PAB(P4', P4', R=r_self)  applied twice, distinct parameters
    P3, P5 pass through unchanged

Besides ``"tpn"``, a few baseline necks that only use P4 are selectable
through ``TpnConfig.neck``: ``identity``, ``conv``, ``fpn`` (top-down P5
into P4, then convs) and ``trans`` (plain encoder layers with learned
positions). Each baseline "block" is three layers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import (
    PabParams,
    PosEncoding,
    encoder_layer,
    flops_pab,
    pab,
    pooled_tokens,
)
from .backbone import FeaturePyramid
from .errors import ShapeError
from .nn import ConvParams, xavier
from .tensor import Tensor, op_tag

NECKS = ("tpn", "identity", "conv", "fpn", "trans")


@dataclass(frozen=True)
class TpnConfig:
    channels: int = 192
    heads: int = 6
    blocks: int = 2
    r_cross: tuple[int, int, int] = (4, 2, 1)
    r_self: int = 2
    mlp_ratio: float = 2.0
    pool: str = "avg"
    attn_scale: str = "per_head"
    neck: str = "tpn"

    def __post_init__(self):
        if self.channels < 1 or self.heads < 1 or self.channels % self.heads:
            raise ValueError(f"channels ({self.channels}) must be a positive multiple of heads ({self.heads})")
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if len(self.r_cross) != 3 or min(self.r_cross) < 1 or self.r_self < 1:
            raise ValueError("pooling ratios must be >= 1")
        if self.neck not in NECKS:
            raise ValueError(f"neck must be one of {NECKS}, got {self.neck!r}")

    @property
    def hidden(self) -> int:
        return int(round(self.mlp_ratio * self.channels))


@dataclass
class TpnBlockParams:
    cross: list[PabParams]
    refine: list[PabParams]


@dataclass
class TpnParams:
    reduce: list[Tensor]
    blocks: list[TpnBlockParams] = field(default_factory=list)
    convs: list[ConvParams] = field(default_factory=list)
    layers: list[PabParams] = field(default_factory=list)
    pos: dict[str, PosEncoding] = field(default_factory=dict)


def init_tpn(
    cfg: TpnConfig,
    in_channels: tuple[int, int, int],
    rng: np.random.Generator,
    p4_tokens: tuple[int, ...] = (),
) -> TpnParams:
    """``p4_tokens`` lists the P4 token counts that need a positional table (``trans`` neck only)."""
    c = cfg.channels
    params = TpnParams(reduce=[xavier(rng, (1, 1, ci, c), ci, c) for ci in in_channels])
    if cfg.neck == "tpn":
        for _ in range(cfg.blocks):
            cross = [PabParams.init(rng, c, cfg.heads, r, cfg.mlp_ratio, cfg.pool) for r in cfg.r_cross]
            refine = [PabParams.init(rng, c, cfg.heads, cfg.r_self, cfg.mlp_ratio, cfg.pool) for _ in range(2)]
            params.blocks.append(TpnBlockParams(cross, refine))
    elif cfg.neck in ("conv", "fpn"):
        params.convs = [ConvParams.init(rng, 3, c, c, padding=1) for _ in range(3 * cfg.blocks)]
    elif cfg.neck == "trans":
        params.layers = [PabParams.init(rng, c, cfg.heads, 1, cfg.mlp_ratio) for _ in range(3 * cfg.blocks)]
        params.pos = {str(n): PosEncoding.zeros(n, c) for n in p4_tokens}
    return params


def reduce_and_flatten(pyr: FeaturePyramid, params: TpnParams) -> FeaturePyramid:
    """1x1 conv (no bias, no activation) of every level to C channels; spatial extents unchanged.

    Maps stay (h, w, C); ``T.flatten`` of any level gives its (h*w, C) tokens.
    """
    out = []
    with op_tag("reduce"):
        for x, w in zip(pyr.levels(), params.reduce):
            if x.shape[2] != w.shape[2]:
                raise ShapeError(f"level has {x.shape[2]} channels, reduction expects {w.shape[2]}")
            out.append(T.conv2d(x, w))
    return FeaturePyramid(*out)


def tpn_block(p3: Tensor, p4: Tensor, p5: Tensor, block: TpnBlockParams, cfg: TpnConfig, capture: list | None = None):
    """Returns (p3, p4', p5); p3 and p5 are the input objects themselves."""
    c = cfg.channels
    if not (p3.shape[2] == p4.shape[2] == p5.shape[2] == c):
        raise ShapeError("all pyramid levels must have C channels")
    q = T.flatten(p4)
    fused = None
    for kv, params in zip((p3, p4, p5), block.cross):
        if capture is not None:
            out, w = pab(q, kv, kv, params, cfg.attn_scale, return_weights=True)
            capture.append(w)
        else:
            out = pab(q, kv, kv, params, cfg.attn_scale)
        fused = out if fused is None else T.add(fused, out)
    for params in block.refine:
        m = T.reshape(fused, p4.shape)
        fused = pab(fused, m, m, params, cfg.attn_scale)
    return p3, T.reshape(fused, p4.shape), p5


def _conv_stack(x: Tensor, convs: list[ConvParams]) -> Tensor:
    for cv in convs:
        x = T.relu(T.conv2d(x, cv.w, cv.b, stride=1, padding=cv.padding))
    return x


def tpn_forward(pyr: FeaturePyramid, params: TpnParams, cfg: TpnConfig, capture: dict | None = None) -> Tensor:
    """Backbone pyramid -> fused (h4, w4, C) map.

    With ``capture`` (a dict), the (heads, n_q, n_kv) attention weights of
    each block's three lateral PABs are stored under the block index.
    """
    red = reduce_and_flatten(pyr, params)
    p3, p4, p5 = red.levels()
    with op_tag("neck"):
        if cfg.neck == "tpn":
            for b, block in enumerate(params.blocks):
                sink = None
                if capture is not None:
                    sink = capture.setdefault(b, [])
                p3, p4, p5 = tpn_block(p3, p4, p5, block, cfg, sink)
            return p4
        if cfg.neck == "identity":
            return p4
        if cfg.neck == "conv":
            return _conv_stack(p4, params.convs)
        if cfg.neck == "fpn":
            top = T.upsample_nearest(p5, 2, p4.shape[:2])
            return _conv_stack(T.add(p4, top), params.convs)
        x = T.flatten(p4)
        pos = params.pos.get(str(x.shape[0]))
        for layer in params.layers:
            x = encoder_layer(x, layer, pos, cfg.attn_scale)
        return T.reshape(x, p4.shape)


def tpn_flops(cfg: TpnConfig, shapes, in_channels: tuple[int, int, int] | None = None) -> int:
    """Multiply-adds of :func:`tpn_forward` for P3/P4/P5 spatial ``shapes`` [(h, w), ...].

    Without ``in_channels`` only the fusion blocks are counted (linear in
    ``cfg.blocks``); with it the 1x1 reductions are added.
    """
    (h3, w3), (h4, w4), (h5, w5) = [tuple(s[:2]) for s in shapes]
    c, hid = cfg.channels, cfg.hidden
    nq = h4 * w4
    total = 0
    if cfg.neck == "tpn":
        per_block = sum(
            flops_pab(nq, h, w, c, r, hid) for (h, w), r in zip(((h3, w3), (h4, w4), (h5, w5)), cfg.r_cross)
        )
        per_block += 2 * flops_pab(nq, h4, w4, c, cfg.r_self, hid)
        total = cfg.blocks * per_block
    elif cfg.neck in ("conv", "fpn"):
        total = 3 * cfg.blocks * nq * c * c * 9
    elif cfg.neck == "trans":
        per_layer = flops_pab(nq, h4, w4, c, 1, hid) - nq * c
        total = 3 * cfg.blocks * per_layer
    if in_channels is not None:
        total += sum(h * w * ci * c for (h, w), ci in zip(((h3, w3), (h4, w4), (h5, w5)), in_channels))
    return total


def attention_tokens(cfg: TpnConfig, shapes) -> list[int]:
    """Pooled key counts seen by the three lateral PABs (for reports)."""
    return [pooled_tokens(s[0], s[1], r) for s, r in zip(shapes, cfg.r_cross)]
