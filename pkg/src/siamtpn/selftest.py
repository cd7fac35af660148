"""Fast built-in property suite behind ``siamtpn selftest``.

Each check returns (ok, detail). The suite needs no test files, so it can
run against an installed package.
"""
from __future__ import annotations

import tempfile
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import MhaParams, flops_mha, flops_pa, multi_head, pooling_attention
from .geometry import BBox
from .gradcheck import gradcheck
from .head import depthwise_xcorr
from .metrics import OracleTracker, build_report, one_pass_eval
from .model import ModelConfig, SiamTPN
from .serialization import load_weights, save_weights
from .tensor import OpCounter, Tensor
from .tpn import TpnConfig, init_tpn, tpn_block

TOL = 1e-4


def _leaf(rng, *shape, positive=False):
    a = rng.standard_normal(shape)
    return Tensor(np.abs(a) + 0.5 if positive else a, requires_grad=True)


def check_gradients(seeds: int = 10) -> tuple[bool, str]:
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(s)
        x, w = _leaf(rng, 5, 5, 2), _leaf(rng, 3, 3, 2, 3)
        a, b = _leaf(rng, 4, 6), _leaf(rng, 6, 3)
        g, bt = _leaf(rng, 6), _leaf(rng, 6)
        cases = [
            (lambda: T.sum(T.mul(T.conv2d(x, w, None, stride=2, padding=1), T.conv2d(x, w, None, stride=2, padding=1))), [x, w]),
            (lambda: T.sum(T.mul(T.matmul(a, b), T.matmul(a, b))), [a, b]),
            (lambda: T.sum(T.mul(T.softmax(a, axis=-1), T.layer_norm(a, g, bt))), [a, g, bt]),
            (lambda: T.sum(T.mul(T.avg_pool2d(x, 2), T.avg_pool2d(x, 2))), [x]),
            (lambda: T.sum(T.mul(depthwise_xcorr(x, T.index(x, (slice(0, 2), slice(0, 2)))), 1.3)), [x]),
        ]
        for fn, inputs in cases:
            worst = max(worst, gradcheck(fn, inputs).max_rel_error)
    return worst < TOL, f"max relative error {worst:.2e} over {seeds} seeds"


def _naive_attention(q, k, v, wq, wk, wv, wo, heads):
    c = q.shape[1]
    d = c // heads
    qp, kp, vp = q @ wq, k @ wk, v @ wv
    out = np.zeros((q.shape[0], c))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        for i in range(q.shape[0]):
            s = np.array([qp[i, sl] @ kp[j, sl] for j in range(k.shape[0])]) / np.sqrt(d)
            e = np.exp(s - s.max())
            out[i, sl] = (e / e.sum()) @ vp[:, sl]
    return out @ wo


def check_oracles() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    p = MhaParams.init(rng, 8, 2)
    q, k, v = rng.standard_normal((5, 8)), rng.standard_normal((7, 8)), rng.standard_normal((7, 8))
    err_attn = np.abs(multi_head(Tensor(q), Tensor(k), Tensor(v), p).data - _naive_attention(q, k, v, p.w_q.data, p.w_k.data, p.w_v.data, p.w_o.data, 2)).max()
    s, t = rng.standard_normal((6, 6, 3)), rng.standard_normal((3, 3, 3))
    ref = np.zeros((4, 4, 3))
    for i in range(4):
        for j in range(4):
            for c in range(3):
                ref[i, j, c] = np.sum(s[i: i + 3, j: j + 3, c] * t[:, :, c])
    err_xcorr = np.abs(depthwise_xcorr(Tensor(s), Tensor(t)).data - ref).max()
    err = max(err_attn, err_xcorr)
    return err <= 1e-12, f"max abs error {err:.1e}"


def check_pa_identity(configs: int = 20) -> tuple[bool, str]:
    worst = 0.0
    for s in range(configs):
        rng = np.random.default_rng(100 + s)
        heads = int(rng.integers(1, 4))
        c = heads * int(rng.integers(1, 5))
        h, w, nq = (int(v) for v in rng.integers(1, 6, size=3))
        p = MhaParams.init(rng, c, heads)
        q, m = Tensor(rng.standard_normal((nq, c))), Tensor(rng.standard_normal((h, w, c)))
        a = pooling_attention(q, m, m, p, 1).data
        b = multi_head(q, T.flatten(m), T.flatten(m), p).data
        worst = max(worst, float(np.abs(a - b).max()))
    return worst <= 1e-12, f"max abs difference {worst:.1e} over {configs} configs"


def check_flops() -> tuple[bool, str]:
    bad = []
    for nq in (64, 256):
        for nkv in (64, 256):
            for c in (16, 32):
                for r in (1, 2, 4):
                    side = int(np.sqrt(nkv))
                    rng = np.random.default_rng(0)
                    p = MhaParams.init(rng, c, 4)
                    q, m = Tensor(rng.standard_normal((nq, c))), Tensor(rng.standard_normal((side, side, c)))
                    with T.no_grad(), OpCounter() as cnt:
                        pooling_attention(q, m, m, p, r)
                    if cnt.tagged("mha", "pool") != flops_pa(nq, side, side, c, r):
                        bad.append((nq, nkv, c, r))
    ok = not bad and flops_mha(256, 256, 192) == 44_040_192
    return ok, "analytic == counted" if ok else f"mismatch at {bad[:3]}"


def check_pyramid_identity() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    cfg = TpnConfig(channels=8, heads=2, blocks=1)
    params = init_tpn(cfg, (8, 8, 8), rng, (4, 1))
    p3, p4, p5 = (Tensor(rng.standard_normal((n, n, 8))) for n in (4, 2, 1))
    o3, _, o5 = tpn_block(p3, p4, p5, params.blocks[0], cfg)
    model = SiamTPN(ModelConfig(channels=16, heads=2, blocks=1))
    ids = {id(t) for t in model.named_parameters().values()}
    shared = len(ids) == len(model.named_parameters())  # one parameter set, used by both branches
    ok = o3 is p3 and o5 is p5 and shared
    return ok, "P3/P5 returned unchanged; single shared parameter set"


def check_serialization() -> tuple[bool, str]:
    model = SiamTPN(ModelConfig(channels=16, heads=2, blocks=1, seed=3))
    rng = np.random.default_rng(0)
    z, x = rng.uniform(size=(80, 80, 3)), rng.uniform(size=(256, 256, 3))
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "w.bin"
        save_weights(model, path)
        other = load_weights(path)
    with T.no_grad():
        a, b = model.forward(z, x), other.forward(z, x)
    rel = max(
        float(np.abs(a.cls.data - b.cls.data).max() / max(np.abs(a.cls.data).max(), 1e-12)),
        float(np.abs(a.reg.data - b.reg.data).max() / max(np.abs(a.reg.data).max(), 1e-12)),
    )
    return rel <= 1e-6, f"max relative output difference {rel:.1e}"


def check_metrics() -> tuple[bool, str]:
    gt = [BBox.from_xywh(10 * i, 0, 10, 10) for i in range(5)]
    frames = [None] * 5
    report = one_pass_eval(OracleTracker(gt), frames, gt)
    shifted = build_report([BBox.from_xywh(5, 0, 10, 10)], [BBox.from_xywh(0, 0, 10, 10)])
    ok = report.auc == 1.0 and report.precision == 1.0 and abs(shifted.ious[0] - 1 / 3) < 1e-12
    return ok, f"oracle AUC {report.auc}, precision {report.precision}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "gradients": check_gradients,
    "oracles": check_oracles,
    "pa-mha-identity": check_pa_identity,
    "flops": check_flops,
    "pyramid-identity": check_pyramid_identity,
    "serialization": check_serialization,
    "metrics": check_metrics,
}


def run(log=print) -> bool:
    all_ok = True
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001 - report and keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        log(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({time.perf_counter() - t0:.2f}s)")
    return all_ok
