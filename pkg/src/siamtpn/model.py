"""Model configuration, parameter bundle and the Siamese forward pass."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, BackboneParams, backbone_forward, init_backbone, level_sizes
from .geometry import MapGeometry
from .head import HeadParams, ScoreMaps, depthwise_xcorr, head_forward
from .nn import named_parameters
from .tensor import Tensor
from .tpn import TpnConfig, TpnParams, init_tpn, tpn_forward


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "tiny"
    stem_channels: int = 16
    channels: int = 192
    heads: int = 6
    blocks: int = 2
    r_cross: tuple[int, int, int] = (4, 2, 1)
    r_self: int = 2
    mlp_ratio: float = 2.0
    pool: str = "avg"
    attn_scale: str = "per_head"
    neck: str = "tpn"
    head_depth: int = 3
    search_size: int = 256
    template_size: int = 80
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "r_cross", tuple(int(r) for r in self.r_cross))
        if self.search_size < 32 or self.template_size < 32:
            raise ValueError("crop sizes must be >= 32")
        if self.head_depth < 1:
            raise ValueError("head_depth must be >= 1")
        self.tpn_config()
        self.backbone_config()

    def tpn_config(self) -> TpnConfig:
        return TpnConfig(
            self.channels, self.heads, self.blocks, self.r_cross, self.r_self,
            self.mlp_ratio, self.pool, self.attn_scale, self.neck,
        )

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(self.backbone, stem_channels=self.stem_channels)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["r_cross"] = list(self.r_cross)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class SiamTPNParams:
    backbone: BackboneParams
    tpn: TpnParams
    head: HeadParams


class SiamTPN:
    """Backbone + TPN shared by both branches, depth-wise correlation, prediction head."""

    def __init__(self, cfg: ModelConfig, params: SiamTPNParams | None = None):
        self.cfg = cfg
        self.tpn_cfg = cfg.tpn_config()
        self.backbone_cfg = cfg.backbone_config()
        self.params = params if params is not None else self._init()

    def _init(self) -> SiamTPNParams:
        rng = np.random.default_rng(self.cfg.seed)
        tokens = (self.p4_size(self.cfg.search_size) ** 2, self.p4_size(self.cfg.template_size) ** 2)
        return SiamTPNParams(
            init_backbone(self.backbone_cfg, rng),
            init_tpn(self.tpn_cfg, self.backbone_cfg.channels, rng, tokens),
            HeadParams.init(rng, self.cfg.channels, self.cfg.head_depth),
        )

    # -- shapes

    def pyramid_sizes(self, size: int) -> tuple[int, int, int]:
        return level_sizes(size, self.backbone_cfg)

    def p4_size(self, size: int) -> int:
        return self.pyramid_sizes(size)[1]

    def map_size(self) -> int:
        return self.p4_size(self.cfg.search_size) - self.p4_size(self.cfg.template_size) + 1

    def map_geometry(self) -> MapGeometry:
        n = self.map_size()
        return MapGeometry(n, n, 16, self.cfg.search_size)

    # -- forward

    def named_parameters(self) -> dict[str, Tensor]:
        return named_parameters(self.params)

    def features(self, image, capture: dict | None = None) -> Tensor:
        """Image crop -> fused (h4, w4, C) map; identical weights for both branches."""
        pyr = backbone_forward(image, self.params.backbone)
        return tpn_forward(pyr, self.params.tpn, self.tpn_cfg, capture)

    def predict(self, search_feat: Tensor, template_feat: Tensor) -> ScoreMaps:
        corr = depthwise_xcorr(search_feat, template_feat)
        return head_forward(corr, self.params.head, self.cfg.search_size)

    def forward(self, template_img, search_img) -> ScoreMaps:
        return self.predict(self.features(search_img), self.features(template_img))

    def copy(self) -> "SiamTPN":
        other = SiamTPN(self.cfg)
        for (name, dst), src in zip(other.named_parameters().items(), self.named_parameters().values()):
            dst.data = src.data.copy()
        return other


def forward_no_grad(model: SiamTPN, template_img, search_img) -> ScoreMaps:
    with T.no_grad():
        return model.forward(template_img, search_img)
