"""Toy pyramid feature extractor with stride-8/16/32 outputs.

Layout: a patchify stem (4x4 conv, stride 4) plus optional 3x3 stem
layers, then three stages of 3x3 convs whose first layer has stride 2.
Stage outputs are P3, P4, P5. All convs use edge padding, so a constant
image gives spatially constant features.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import ConvParams, named_parameters
from .tensor import Tensor

PRESETS: dict[str, tuple[int, int, int]] = {
    "alex": (384, 384, 256),
    "mobile": (32, 96, 320),
    "shuffle": (116, 232, 464),
    "tiny": (16, 32, 64),
}

# Reported for the real pretrained networks; printed next to our own counts, never compared.
PUBLISHED_BACKBONES = {
    "alex": {"params_m": 3.1, "gflops": 4.33},
    "mobile": {"params_m": 1.81, "gflops": 0.39},
    "shuffle": {"params_m": 0.8, "gflops": 0.16},
}

STEM_STRIDE = 4
# inputs in [0, 1] are standardized before the stem
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25
MIN_INPUT = 32


@dataclass(frozen=True)
class BackboneConfig:
    preset: str = "tiny"
    channels: tuple[int, int, int] | None = None
    stem_channels: int = 16
    stem_layers: int = 1
    stage_layers: int = 2

    def __post_init__(self):
        if self.channels is None:
            if self.preset not in PRESETS:
                raise ValueError(f"unknown backbone preset {self.preset!r}; choose from {sorted(PRESETS)}")
            object.__setattr__(self, "channels", PRESETS[self.preset])
        if len(self.channels) != 3 or min(self.channels) < 1 or self.stem_channels < 1:
            raise ValueError(f"channels must be three positive ints, got {self.channels}")
        if self.stem_layers < 1:
            raise ValueError("the stem needs at least one layer")
        if self.stage_layers < 1:
            raise ValueError("each stage needs at least one layer")


@dataclass
class BackboneParams:
    stem: list[ConvParams] = field(default_factory=list)
    stages: list[list[ConvParams]] = field(default_factory=list)


@dataclass
class FeaturePyramid:
    """P3/P4/P5 maps (h, w, c) at strides 8/16/32."""

    p3: Tensor
    p4: Tensor
    p5: Tensor

    STRIDES = (8, 16, 32)

    def levels(self) -> tuple[Tensor, Tensor, Tensor]:
        return (self.p3, self.p4, self.p5)

    def shapes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(t.shape for t in self.levels())


def _layers(cfg: BackboneConfig):
    """(kernel, stride, padding, c_in, c_out, stage) for every conv, in order."""
    out = [(STEM_STRIDE, STEM_STRIDE, 0, 3, cfg.stem_channels, -1)]
    out += [(3, 1, 1, cfg.stem_channels, cfg.stem_channels, -1)] * (cfg.stem_layers - 1)
    cin = cfg.stem_channels
    for s, c in enumerate(cfg.channels):
        out.append((3, 2, 1, cin, c, s))
        out += [(3, 1, 1, c, c, s)] * (cfg.stage_layers - 1)
        cin = c
    return out


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> BackboneParams:
    params = BackboneParams()
    for k, s, p, cin, cout, stage in _layers(cfg):
        conv = ConvParams.init(rng, k, cin, cout, stride=s, padding=p, init="he")
        if stage < 0:
            params.stem.append(conv)
        else:
            while len(params.stages) <= stage:
                params.stages.append([])
            params.stages[stage].append(conv)
    return params


def _conv_relu(x: Tensor, c: ConvParams) -> Tensor:
    return T.relu(T.conv2d(x, c.w, c.b, stride=c.stride, padding=c.padding, padding_mode="edge"))


def backbone_forward(image, params: BackboneParams) -> FeaturePyramid:
    """(H, W, 3) image in [0, 1] -> FeaturePyramid. H, W >= 32."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {x.shape}")
    if min(x.shape[:2]) < MIN_INPUT:
        raise ValueError(f"input {x.shape[:2]} is smaller than {MIN_INPUT}x{MIN_INPUT}")
    with T.op_tag("backbone"):
        x = T.scale(T.sub(x, PIXEL_MEAN), 1.0 / PIXEL_STD)
        for c in params.stem:
            x = _conv_relu(x, c)
        levels = []
        for stage in params.stages:
            for c in stage:
                x = _conv_relu(x, c)
            levels.append(x)
    return FeaturePyramid(*levels)


def _out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def level_sizes(size: int, cfg: BackboneConfig | None = None) -> tuple[int, int, int]:
    """Spatial extent of P3/P4/P5 for a square input of side ``size``."""
    cfg = cfg or BackboneConfig()
    n, sizes = size, {}
    for k, s, p, _, _, stage in _layers(cfg):
        n = _out(n, k, s, p)
        if stage >= 0:
            sizes[stage] = n
    return (sizes[0], sizes[1], sizes[2])


def backbone_cost(cfg: BackboneConfig, size: int = 256) -> dict[str, int]:
    """Parameter count and conv multiply-adds for a ``size`` x ``size`` input."""
    n = size
    params = flops = 0
    for k, s, p, cin, cout, _ in _layers(cfg):
        n = _out(n, k, s, p)
        params += k * k * cin * cout + cout
        flops += n * n * cout * k * k * cin
    return {"param_count": params, "flops": flops}


def synthetic_pyramid(seed: int, shapes) -> FeaturePyramid:
    """Deterministic standard-normal pyramid with the three requested (h, w, c) shapes."""
    rng = np.random.default_rng(seed)
    return FeaturePyramid(*(Tensor(rng.standard_normal(tuple(s))) for s in shapes))


def frozen_names(params: BackboneParams, prefix: str = "backbone") -> set[str]:
    """Names of the first stem layer; kept fixed during toy training."""
    return set(named_parameters(params.stem[0], f"{prefix}.stem.0"))
