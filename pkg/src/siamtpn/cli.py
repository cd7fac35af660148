"""Command-line interface: ``siamtpn <command> ...``.

Exit codes: 0 ok, 1 usage error, 2 data error (bad files, weights, specs),
3 numeric error (non-finite values, failed self-checks).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import DEFAULTS, MODEL_DEFAULTS, Settings, load_config, parse_sequence_spec
from .errors import DataError, NumericError
from .metrics import EvalReport, one_pass_eval

log = logging.getLogger("siamtpn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def max_workers() -> int:
    """Worker cap from ``SIAMTPN_THREADS`` (default: CPU count)."""
    raw = os.environ.get("SIAMTPN_THREADS", "")
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SIAMTPN_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"SIAMTPN_THREADS must be a positive integer, got {raw!r}")
    return n


def _add_config_flags(p: argparse.ArgumentParser, keys=DEFAULTS) -> None:
    g = p.add_argument_group("configuration (mirrors config-file keys; overrides --config)")
    g.add_argument("--config", help="flat key = value config file")
    for key, default in keys.items():
        flag = "--" + key.replace("_", "-")
        if any(flag in a.option_strings for a in p._actions):
            continue
        g.add_argument(flag, dest=key, default=None, metavar=type(default).__name__.upper(), help=f"(default {default!r})")


def _settings(args, base: dict | None = None) -> tuple[Settings, set[str]]:
    """Resolved settings plus the model keys the user set explicitly."""
    file_values = {**(base or {}), **(load_config(args.config) if getattr(args, "config", None) else {})}
    overrides = {k: getattr(args, k) for k in DEFAULTS if getattr(args, k, None) is not None}
    explicit_model = {k for k in {**file_values, **overrides} if k in MODEL_DEFAULTS}
    return Settings(file_values, overrides), explicit_model


def _model(args, settings: Settings, explicit_model: set[str]):
    """Load ``--weights`` or build a random model.

    Explicit model keys are checked against the stored config: each one must
    match, and the remaining keys come from the file.
    """
    from .model import ModelConfig, SiamTPN
    from .serialization import load_weights, read_manifest

    if getattr(args, "weights", None):
        expected = None
        if explicit_model:
            manifest, _ = read_manifest(args.weights)
            try:
                stored = ModelConfig.from_dict(manifest["config"])
            except (TypeError, ValueError):
                stored = None  # load_weights reports the broken config
            if stored is not None:
                try:
                    expected = stored.replace(**{k: settings[k] for k in explicit_model})
                except ValueError as exc:
                    raise DataError(f"invalid model config: {exc}") from exc
        return load_weights(args.weights, expected)
    log.warning("no --weights given: using an untrained, randomly initialized model")
    return SiamTPN(settings.model_config())


def _sequence(args):
    from .imageio import load_sequence_dir
    from .synthetic import SyntheticSequence

    if args.synthetic:
        spec_text = Path(args.synthetic).read_text() if Path(args.synthetic).is_file() else args.synthetic
        seq = SyntheticSequence(parse_sequence_spec(spec_text))
        return seq, seq.boxes
    if not args.seq_dir:
        raise UsageError("give a sequence directory or --synthetic SPEC")
    return load_sequence_dir(args.seq_dir)


def _write_report(report: EvalReport, out: str | None, csv: str | None) -> None:
    print(report.to_table())
    if out:
        Path(out).write_text(report.to_json())
    if csv:
        Path(csv).write_text(report.to_csv())


def cmd_track(args) -> int:
    from .tracker import Tracker

    settings, explicit = _settings(args)
    model = _model(args, settings, explicit)
    frames, boxes = _sequence(args)
    report = one_pass_eval(Tracker(model, settings.post_config()), frames, boxes)
    _write_report(report, args.out, args.csv)
    return EXIT_NUMERIC if report.failed else EXIT_OK


SUITES = {
    "easy": ["easy"] + [f"seed={s},frames=100" for s in (1001, 1002)],
    "standard": [
        "easy",
        "seed=2001,trajectory=sinusoidal,speed=2.0",
        "seed=2002,distractor=true",
        "seed=2003,size_change=0.3",
    ],
}


def _suite(spec: str) -> list:
    from .imageio import load_sequence_dir
    from .synthetic import SyntheticSequence

    if spec in SUITES:
        return [("synthetic:" + s, SyntheticSequence(parse_sequence_spec(s))) for s in SUITES[spec]]
    path = Path(spec)
    if path.is_dir():
        dirs = sorted(d for d in path.iterdir() if (d / "groundtruth.txt").exists())
        if not dirs:
            raise DataError(f"{path} contains no sequence directories")
        return [(d.name, load_sequence_dir(d)) for d in dirs]
    if path.is_file():
        lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
        return [("synthetic:" + s, SyntheticSequence(parse_sequence_spec(s))) for s in lines]
    raise DataError(f"unknown suite {spec!r}: use {sorted(SUITES)}, a directory of sequences or a spec file")


def _eval_one(job) -> dict:
    from .tracker import Tracker

    name, seq, model, post = job
    frames, boxes = (seq, seq.boxes) if hasattr(seq, "boxes") else seq
    with threadpool_limits(limits=1):
        report = one_pass_eval(Tracker(model, post), frames, boxes)
    return {"sequence": name, **report.to_dict()}


def cmd_eval(args) -> int:
    settings, explicit = _settings(args)
    model = _model(args, settings, explicit)
    jobs = [(name, seq, model, settings.post_config()) for name, seq in _suite(args.suite)]
    workers = min(max_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_eval_one, jobs))
    else:
        results = [_eval_one(j) for j in jobs]
    summary = {
        "sequences": results,
        "mean_auc": float(np.mean([r["auc"] for r in results])),
        "mean_precision_20px": float(np.mean([r["precision_20px"] for r in results])),
        "any_failed": any(r["failed"] for r in results),
    }
    width = max(len(r["sequence"]) for r in results)
    for r in results:
        print(f"{r['sequence']:<{width}}  AUC {r['auc']:.4f}  prec@20 {r['precision_20px']:.4f}  mIoU {r['mean_iou']:.4f}{'  FAILED' if r['failed'] else ''}")
    print(f"{'mean':<{width}}  AUC {summary['mean_auc']:.4f}  prec@20 {summary['mean_precision_20px']:.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=2))
    return EXIT_NUMERIC if summary["any_failed"] else EXIT_OK


def cmd_bench(args) -> int:
    from .bench import benchmark, paired_benchmark

    settings, _ = _settings(args)
    reps, warmup = int(settings["reps"]), int(settings["warmup"])
    if args.paired:
        cfgs = [Settings(load_config(p)).model_config() for p in args.paired]
        try:
            results = paired_benchmark(cfgs, warmup, reps, post=settings.post_config())
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        for path, res in zip(args.paired, results):
            print(res.to_table(path))
        a, b = results
        print(f"median ratio {args.paired[0]} / {args.paired[1]}: {a.median_total / b.median_total:.3f} (tpn {a.median('tpn') / b.median('tpn'):.3f})")
        out = {p: r.to_dict() for p, r in zip(args.paired, results)}
    else:
        try:
            res = benchmark(settings.model_config(), warmup, reps, post=settings.post_config())
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        print(res.to_table(args.config or "defaults"))
        out = res.to_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2))
    return EXIT_OK


# toy size used by train-toy unless the config file or flags say otherwise
TOY_MODEL = {"channels": 32, "heads": 2, "blocks": 1}


def cmd_train_toy(args) -> int:
    from .model import SiamTPN
    from .serialization import save_weights
    from .train import make_pair, train_on_pairs

    settings, _ = _settings(args, TOY_MODEL)
    cfg = settings.model_config()
    model = SiamTPN(cfg)
    pairs = [make_pair(cfg.seed * 1000 + i, cfg.search_size, cfg.template_size) for i in range(int(settings["pairs"]))]
    trace = train_on_pairs(model, pairs, int(settings["steps"]), float(settings["lr"]), seed=cfg.seed, log=log.info)
    save_weights(model, args.out)
    tail = trace[-50:] if trace else [float("nan")]
    print(f"trained {len(trace)} steps on {len(pairs)} pairs; final mean loss {np.mean(tail):.4f}; weights -> {args.out}")
    return EXIT_OK


def cmd_flops(args) -> int:
    from .bench import flops_report, format_flops

    settings, _ = _settings(args)
    cfg = settings.model_config()
    rows = flops_report(cfg)
    print(format_flops(rows, cfg))
    return EXIT_OK if all(r.match for r in rows) else EXIT_NUMERIC


def cmd_attn_export(args) -> int:
    from . import tracker as trk
    from .imageio import write_pgm

    settings, explicit = _settings(args)
    model = _model(args, settings, explicit)
    frames, boxes = _sequence(args)
    if not 0 <= args.frame < len(frames):
        raise DataError(f"frame {args.frame} out of range for a {len(frames)}-frame sequence")
    state = trk.init(model, frames[0], boxes[0])
    for t in range(1, args.frame):
        trk.update(model, state, frames[t], settings.post_config())
    maps = trk.export_attention(model, state, frames[args.frame], args.level)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for name, m in maps["normalized"].items():
        write_pgm(out / f"{name}_to_p4.pgm", m)
        summary[name] = {"shape": list(m.shape), "raw_sum": float(maps["raw"][name].sum())}
    (out / "attention.json").write_text(json.dumps({"frame": args.frame, "level": args.level, "maps": summary}, indent=2))
    print(f"wrote {len(summary)} maps to {out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run

    return EXIT_OK if run() else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="siamtpn", description="Siamese transformer pyramid tracker (numpy).")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("track", help="one-pass evaluation of one sequence")
    t.add_argument("seq_dir", nargs="?", help="directory with *.ppm frames and groundtruth.txt")
    t.add_argument("--synthetic", help="'easy', key=value,... sequence spec, or a spec file")
    t.add_argument("--weights")
    t.add_argument("--out", help="JSON report path")
    t.add_argument("--csv", help="success-plot CSV path")
    _add_config_flags(t)
    t.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", help="evaluate over a suite of sequences")
    e.add_argument("--suite", required=True, help=f"{sorted(SUITES)}, a directory of sequence dirs, or a file of specs")
    e.add_argument("--weights")
    e.add_argument("--out")
    _add_config_flags(e)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="latency benchmark with stage breakdown")
    b.add_argument("--paired", nargs=2, metavar=("CFG_A", "CFG_B"), help="interleave two config files on identical inputs")
    b.add_argument("--out")
    _add_config_flags(b)
    b.set_defaults(func=cmd_bench)

    tr = sub.add_parser("train-toy", help="train a toy model on synthetic pairs")
    tr.add_argument("--out", required=True, help="weights file to write")
    _add_config_flags(tr)
    tr.set_defaults(func=cmd_train_toy)

    f = sub.add_parser("flops", help="analytic vs instrumented multiply-add counts")
    _add_config_flags(f)
    f.set_defaults(func=cmd_flops)

    a = sub.add_parser("attn-export", help="write central-query attention maps as PGM")
    a.add_argument("seq_dir", nargs="?")
    a.add_argument("--synthetic")
    a.add_argument("--weights")
    a.add_argument("--frame", type=int, required=True)
    a.add_argument("--level", type=int, default=0, help="TPN block index")
    a.add_argument("--out", required=True, help="output directory")
    _add_config_flags(a)
    a.set_defaults(func=cmd_attn_export)

    s = sub.add_parser("selftest", help="run the built-in property suite")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
        with threadpool_limits(limits=max_workers()):
            return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error [E{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
