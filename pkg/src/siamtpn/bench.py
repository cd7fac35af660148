"""Latency benchmark with stage breakdown, paired comparisons, and the FLOPs report."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .backbone import backbone_cost, backbone_forward
from .geometry import BBox
from .head import PostprocessConfig, head_flops, xcorr_flops
from .model import ModelConfig, SiamTPN
from .tensor import OpCounter, Tensor
from .tpn import tpn_flops, tpn_forward
from .tracker import StageTimes, init, update

STAGES = ("backbone", "tpn", "head", "post")
MIN_REPS = 10

# Reference labels only: neck comparison on a ShuffleNetV2 backbone (params in M, GFLOPs, CPU FPS).
PUBLISHED_NECKS = {
    "identity": {"params_m": 1.57, "gflops": 0.6, "fps_cpu": 48.1},
    "conv": {"params_m": 3.56, "gflops": 1.4, "fps_cpu": 31.2},
    "fpn": {"params_m": 3.85, "gflops": 1.62, "fps_cpu": 26.9},
    "trans": {"params_m": 4.24, "gflops": 1.79, "fps_cpu": 22.0},
    "tpn_without_pa": {"params_m": 4.84, "gflops": 2.05, "fps_cpu": 17.7},
    "tpn": {"params_m": 4.24, "gflops": 1.31, "fps_cpu": 32.1},
}


def bench_input(seed: int = 0, size: int = 320) -> tuple[np.ndarray, BBox]:
    """A fixed textured frame and target box; identical for every config."""
    rng = np.random.default_rng(seed)
    frame = rng.uniform(0.0, 1.0, size=(size * 3 // 4, size, 3))
    return frame, BBox(size / 2.0, size * 3 / 8.0, 40.0, 32.0)


def _summary(samples: list[float]) -> dict[str, float]:
    a = np.asarray(samples)
    return {"median": float(np.median(a)), "mean": float(a.mean()), "p95": float(np.percentile(a, 95)), "min": float(a.min())}


@dataclass
class BenchResult:
    config: ModelConfig
    reps: int
    total: list[float] = field(default_factory=list)
    stages: dict[str, list[float]] = field(default_factory=lambda: {s: [] for s in STAGES})

    def record(self, t: StageTimes) -> None:
        self.total.append(t.total - t.crop)
        for s, v in t.stages().items():
            self.stages[s].append(v)

    @property
    def median_total(self) -> float:
        return float(np.median(self.total))

    @property
    def fps(self) -> float:
        return 1.0 / self.median_total

    def median(self, stage: str) -> float:
        return float(np.median(self.stages[stage]))

    def to_dict(self) -> dict:
        return {
            "reps": self.reps,
            "fps": self.fps,
            "total_s": _summary(self.total),
            "stages_s": {s: _summary(v) for s, v in self.stages.items()},
        }

    def to_table(self, label: str = "") -> str:
        lines = [f"{label or 'config'}: {self.reps} reps, median {self.median_total * 1e3:.2f} ms ({self.fps:.1f} FPS)"]
        for s in STAGES:
            lines.append(f"  {s:<9} {self.median(s) * 1e3:9.3f} ms")
        return "\n".join(lines)


def benchmark(
    cfg: ModelConfig,
    warmup: int = 3,
    reps: int = 30,
    seed: int = 0,
    post: PostprocessConfig = PostprocessConfig(),
    model: SiamTPN | None = None,
) -> BenchResult:
    """Median-of-reps wall clock of one tracking update, pinned to one BLAS thread."""
    return paired_benchmark([cfg], warmup, reps, seed, post, [model] if model is not None else None)[0]


def paired_benchmark(
    cfgs: list[ModelConfig],
    warmup: int = 3,
    reps: int = 30,
    seed: int = 0,
    post: PostprocessConfig = PostprocessConfig(),
    models: list[SiamTPN] | None = None,
) -> list[BenchResult]:
    """Interleave configs rep by rep on the same frame object, so inputs are bit-identical."""
    if reps < MIN_REPS:
        raise ValueError(f"reps must be >= {MIN_REPS}")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    models = models or [SiamTPN(c) for c in cfgs]
    frame, box = bench_input(seed)
    frame.setflags(write=False)
    results = [BenchResult(m.cfg, reps) for m in models]
    with threadpool_limits(limits=1):
        states = [init(m, frame, box) for m in models]
        for k in range(warmup + reps):
            for m, st, res in zip(models, states, results):
                st.current = box  # every rep tracks the same search region
                times = StageTimes()
                update(m, st, frame, post, times)
                if k >= warmup:
                    res.record(times)
    return results


def paired_tpn_timing(cfg_a: ModelConfig, cfg_b: ModelConfig, reps: int = 30, warmup: int = 3, seed: int = 0) -> tuple[list[float], list[float]]:
    """Wall clock of the TPN stage alone for two configs fed the identical backbone pyramid."""
    if reps < MIN_REPS:
        raise ValueError(f"reps must be >= {MIN_REPS}")
    ma, mb = SiamTPN(cfg_a), SiamTPN(cfg_b)
    if ma.backbone_cfg != mb.backbone_cfg or cfg_a.search_size != cfg_b.search_size:
        raise ValueError("paired TPN timing needs the same backbone and search size")
    rng = np.random.default_rng(seed)
    crop = rng.uniform(0.0, 1.0, size=(cfg_a.search_size, cfg_a.search_size, 3))
    ta, tb = [], []
    with threadpool_limits(limits=1), T.no_grad():
        pyr = backbone_forward(crop, ma.params.backbone)
        for k in range(warmup + reps):
            for m, out in ((ma, ta), (mb, tb)):
                t0 = time.perf_counter()
                tpn_forward(pyr, m.params.tpn, m.tpn_cfg)
                dt = time.perf_counter() - t0
                if k >= warmup:
                    out.append(dt)
    return ta, tb


@dataclass
class FlopsRow:
    stage: str
    analytic: int
    instrumented: int

    @property
    def match(self) -> bool:
        return self.analytic == self.instrumented


TPN_TAGS = ("reduce", "mha", "pool", "proj", "mlp", "neck")


def _instrumented(model: SiamTPN, size: int) -> tuple[dict[str, int], Tensor]:
    with T.no_grad(), OpCounter() as c:
        feat = model.features(np.zeros((size, size, 3)))
    return dict(c.by_tag), feat


def flops_report(cfg: ModelConfig) -> list[FlopsRow]:
    """Analytic vs counted multiply-adds per stage of one search-frame update (+ template init)."""
    model = SiamTPN(cfg)
    s_tags, s_feat = _instrumented(model, cfg.search_size)
    t_tags, t_feat = _instrumented(model, cfg.template_size)
    with T.no_grad(), OpCounter() as c:
        model.predict(s_feat, t_feat)
    chans = model.backbone_cfg.channels

    def shapes(size):
        n = model.pyramid_sizes(size)
        return [(k, k) for k in n]

    rows = [
        FlopsRow("backbone (search)", backbone_cost(model.backbone_cfg, cfg.search_size)["flops"], s_tags.get("backbone", 0)),
        FlopsRow("tpn (search)", tpn_flops(model.tpn_cfg, shapes(cfg.search_size), chans), sum(s_tags.get(t, 0) for t in TPN_TAGS)),
        FlopsRow("xcorr", xcorr_flops(s_feat.shape[:2], t_feat.shape[:2], cfg.channels), c.by_tag.get("xcorr", 0)),
        FlopsRow("head", head_flops(model.map_size(), model.map_size(), cfg.channels, cfg.head_depth), c.by_tag.get("head", 0)),
        FlopsRow("backbone (template, once)", backbone_cost(model.backbone_cfg, cfg.template_size)["flops"], t_tags.get("backbone", 0)),
        FlopsRow("tpn (template, once)", tpn_flops(model.tpn_cfg, shapes(cfg.template_size), chans), sum(t_tags.get(t, 0) for t in TPN_TAGS)),
    ]
    return rows


def format_flops(rows: list[FlopsRow], cfg: ModelConfig) -> str:
    per_frame = sum(r.analytic for r in rows if "once" not in r.stage)
    width = max(len(r.stage) for r in rows)
    lines = [f"{'stage':<{width}}  {'analytic':>14}  {'counted':>14}  match"]
    for r in rows:
        lines.append(f"{r.stage:<{width}}  {r.analytic:>14,}  {r.instrumented:>14,}  {'yes' if r.match else 'NO'}")
    lines.append(f"per-frame total: {per_frame:,} multiply-adds ({per_frame / 1e9:.3f} G)")
    ref = PUBLISHED_NECKS.get(cfg.neck if (cfg.neck != "tpn" or cfg.r_cross != (1, 1, 1)) else "tpn_without_pa")
    if ref is not None:
        lines.append(
            f"reference label (published, ShuffleNetV2 neck={cfg.neck}): {ref['gflops']} GFLOPs, "
            f"{ref['params_m']} M params, {ref['fps_cpu']} FPS on CPU — not comparable, not asserted"
        )
    return "\n".join(lines)
