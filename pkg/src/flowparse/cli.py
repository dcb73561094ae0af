"""Command-line surface: generate, train, infer, eval, bench.

Flag resolution order is flags > config file (--config, JSON) > defaults,
and every command that produces an output directory echoes its fully
resolved configuration there for reproducibility.  Exit codes: 0 success,
2 usage/validation, 3 data or shape errors, 4 internal invariant breach.

Timing is opt-in for `infer` (--time): the cost report's wall_ms block
stays empty otherwise so repeated runs with identical flags produce
byte-identical output trees.  `bench` always times; its CSV is not
expected to be byte-stable.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics, parsing, pipeline, viz
from .errors import ContractViolation, DataError, InvariantBreach
from .model import ModelConfig, init_model, load_model, save_model
from .pipeline import PipelineConfig
from .synthdata import Dataset, SyntheticScene, generate

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4


def _worker_cap() -> int:
    raw = os.environ.get("ATEN_THREADS")
    if raw is None:
        return 1
    try:
        cap = int(raw)
    except ValueError:
        raise ContractViolation(f"ATEN_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise ContractViolation(f"ATEN_THREADS must be >= 1, got {cap}")
    return cap


def _resolve_config(args: argparse.Namespace, defaults: dict) -> dict:
    """flags > config file > defaults; unknown file keys are rejected."""
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        blob = json.loads(path.read_text())
        for key, value in blob.items():
            if key not in defaults:
                raise ContractViolation(f"unknown config key {key!r}")
            resolved[key] = value
    for key in defaults:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            resolved[key] = flag_val
    return resolved


def _echo_config(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "workers": _worker_cap(), **resolved}
    (out_dir / "config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

GENERATE_DEFAULTS = {
    "seed": 0, "frames": 12, "size": 64, "instances": 2,
    "max_velocity": 3.0, "velocity_quantum": 0.0,
    "degrade_frames": "", "blur_sigma": 0.0, "noise_sigma": 0.0,
}


def cmd_generate(args) -> int:
    cfg = _resolve_config(args, GENERATE_DEFAULTS)
    degrade = tuple(int(v) for v in str(cfg["degrade_frames"]).split(",") if v != "")
    scene = SyntheticScene(
        seed=int(cfg["seed"]), num_frames=int(cfg["frames"]),
        height=int(cfg["size"]), width=int(cfg["size"]),
        num_instances=int(cfg["instances"]),
        max_velocity=float(cfg["max_velocity"]),
        velocity_quantum=float(cfg["velocity_quantum"]),
        degrade_frames=degrade,
        blur_sigma=float(cfg["blur_sigma"]),
        noise_sigma=float(cfg["noise_sigma"]),
    )
    out = Path(args.out)
    generate(scene, out)
    _echo_config(out, "generate", cfg)
    print(f"dataset written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "epochs": 10, "steps": 0, "lr": 1e-3, "seed": 0,
    "segment_length": 3, "encoding_range": 2,
    "flow_source": "ground_truth", "channels": 32, "depth": 4,
    "fixed_batch": 0,
}


def _require_exists(path, what: str) -> None:
    if not path or not Path(path).exists():
        raise ContractViolation(f"{what} not found: {path!r}")


def cmd_train(args) -> int:
    cfg = _resolve_config(args, TRAIN_DEFAULTS)
    _require_exists(args.data, "dataset")
    dataset = Dataset(args.data)
    pconfig = PipelineConfig(
        segment_length=int(cfg["segment_length"]),
        encoding_range=int(cfg["encoding_range"]),
        flow_source=str(cfg["flow_source"]),
        seed=int(cfg["seed"]),
    )
    model = init_model(ModelConfig(
        num_part_classes=dataset.num_part_classes,
        channels=int(cfg["channels"]), depth=int(cfg["depth"]),
        init_seed=int(cfg["seed"]),
    ))
    steps = int(cfg["steps"])
    if steps <= 0:
        segments = len(pipeline.plan_segments(dataset.num_frames, pconfig))
        steps = int(cfg["epochs"]) * max(1, segments)

    history = pipeline.train(model, dataset, pconfig, steps=steps,
                             lr=float(cfg["lr"]), seed=int(cfg["seed"]),
                             fixed_batch=bool(int(cfg["fixed_batch"])))

    out = Path(args.out)
    save_model(model, out / "checkpoint")
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "parsing", "cls", "box", "mask", "total"])
        for i, b in enumerate(history):
            writer.writerow([i, f"{b.parsing:.10g}", f"{b.cls:.10g}",
                             f"{b.box:.10g}", f"{b.mask:.10g}", f"{b.total:.10g}"])
    _echo_config(out, "train", cfg)
    print(f"trained {steps} steps; initial loss {history[0].total:.4f}, "
          f"final {history[-1].total:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

INFER_DEFAULTS = {
    "segment_length": 3, "encoding_range": 2, "flow_source": "ground_truth",
    "proposal_source": "ground_truth", "proposal_file": "",
    "temporal_mode": "gru", "warp_align": 1, "streaming": 0,
    "seed": 0, "time": 0, "viz": 1,
}


def cmd_infer(args) -> int:
    cfg = _resolve_config(args, INFER_DEFAULTS)
    _require_exists(args.data, "dataset")
    dataset = Dataset(args.data)
    if args.checkpoint:
        _require_exists(args.checkpoint, "checkpoint")
        model = load_model(args.checkpoint)
    else:
        model = init_model(ModelConfig(num_part_classes=dataset.num_part_classes))
    pconfig = PipelineConfig(
        segment_length=int(cfg["segment_length"]),
        encoding_range=int(cfg["encoding_range"]),
        flow_source=str(cfg["flow_source"]),
        proposal_source=str(cfg["proposal_source"]),
        proposal_file=str(cfg["proposal_file"]) or None,
        temporal_mode=str(cfg["temporal_mode"]),
        warp_align=bool(int(cfg["warp_align"])),
        seed=int(cfg["seed"]),
    )
    results, report = pipeline.instrumented_inference(
        model, dataset, pconfig, with_timing=bool(int(cfg["time"])),
        streaming=bool(int(cfg["streaming"])))

    out = Path(args.out)
    for r in results:
        frame_dir = out / "predictions" / f"{r['frame']:05d}"
        parsing.save_frame_predictions(frame_dir, r["instances"], r["global_parts"])
        if int(cfg["viz"]):
            viz.save_overlay_png(out / "viz" / f"{r['frame']:05d}.png",
                                 dataset.frame(r["frame"]).image,
                                 r["global_parts"], r["instances"])
    (out / "cost_report.json").write_text(report.to_json())
    _echo_config(out, "infer", cfg)
    print(f"inferred {len(results)} frames; r_exact={report.r_exact:.3f} "
          f"r_approx={report.r_approx:.3f} measured_r={report.measured_r:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _load_predictions(pred_root: Path, dataset: Dataset):
    preds_per_frame, pred_maps = [], []
    for t in range(dataset.num_frames):
        frame_dir = pred_root / "predictions" / f"{t:05d}"
        fused, global_parts = parsing.load_frame_predictions(frame_dir)
        preds_per_frame.append(fused)
        pred_maps.append(global_parts)
    return preds_per_frame, pred_maps


def cmd_eval(args) -> int:
    _require_exists(args.gt, "ground-truth dataset")
    _require_exists(args.pred, "prediction directory")
    dataset = Dataset(args.gt)
    preds_per_frame, pred_maps = _load_predictions(Path(args.pred), dataset)
    gts_per_frame = []
    gt_maps = []
    for t in range(dataset.num_frames):
        gts_per_frame.append([
            {"score": 1.0, "mask": g["mask"], "parts": g["parts"], "box": g["box"]}
            for g in dataset.gt_instances(t)
        ])
        gt_maps.append(dataset.part_labels(t))
    report = metrics.evaluate(preds_per_frame, gts_per_frame, pred_maps, gt_maps,
                              dataset.num_part_classes)
    metrics.write_report(args.report, report)
    print(f"mean_iou={report['mean_iou']:.4f} ap_r={report['ap_r']:.4f} "
          f"ap_r_vol={report['ap_r_vol']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

BENCH_DEFAULTS = {
    "sweep_l": "1,3,5", "encoding_range": 2, "flow_source": "ground_truth",
    "proposal_source": "ground_truth", "seed": 0,
}


def cmd_bench(args) -> int:
    cfg = _resolve_config(args, BENCH_DEFAULTS)
    _require_exists(args.data, "dataset")
    dataset = Dataset(args.data)
    if args.checkpoint:
        _require_exists(args.checkpoint, "checkpoint")
        model = load_model(args.checkpoint)
    else:
        model = init_model(ModelConfig(num_part_classes=dataset.num_part_classes))
    sweep = [int(v) for v in str(cfg["sweep_l"]).split(",") if v != ""]
    if not sweep:
        raise ContractViolation("empty --sweep-l")

    gt_maps = [dataset.part_labels(t) for t in range(dataset.num_frames)]
    rows = []
    for l in sweep:
        pconfig = PipelineConfig(
            segment_length=l,
            encoding_range=int(cfg["encoding_range"]),
            flow_source=str(cfg["flow_source"]),
            proposal_source=str(cfg["proposal_source"]),
            seed=int(cfg["seed"]),
        )
        t0 = time.perf_counter()
        results, report = pipeline.instrumented_inference(model, dataset, pconfig)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        pred_maps = [r["global_parts"] for r in results]
        _per, miou = metrics.mean_iou(pred_maps, gt_maps, dataset.num_part_classes)
        rows.append({"l": l, "mean_iou": miou, "r_exact": report.r_exact,
                     "wall_ms": wall_ms})

    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    with open(report_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["l", "mean_iou", "r_exact", "wall_ms"])
        writer.writeheader()
        for row in rows:
            writer.writerow({"l": row["l"], "mean_iou": f"{row['mean_iou']:.6f}",
                             "r_exact": f"{row['r_exact']:.6f}",
                             "wall_ms": f"{row['wall_ms']:.3f}"})
    for row in rows:
        print(f"l={row['l']}: mean_iou={row['mean_iou']:.4f} "
              f"r_exact={row['r_exact']:.4f} wall_ms={row['wall_ms']:.1f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowparse",
        description="Key-frame video instance parsing: synthetic data, training, "
                    "inference, evaluation and cost benchmarking.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--size", type=int, help="frame height and width (multiple of 4)")
    p.add_argument("--instances", type=int)
    p.add_argument("--max-velocity", dest="max_velocity", type=float)
    p.add_argument("--velocity-quantum", dest="velocity_quantum", type=float)
    p.add_argument("--degrade-frames", dest="degrade_frames",
                   help="comma-separated frame indices to blur/noise")
    p.add_argument("--blur-sigma", dest="blur_sigma", type=float)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the toy pipeline end-to-end")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, help="overrides epochs when > 0")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--segment-length", dest="segment_length", type=int)
    p.add_argument("--encoding-range", dest="encoding_range", type=int)
    p.add_argument("--flow-source", dest="flow_source",
                   choices=["zero", "ground_truth", "learned"])
    p.add_argument("--channels", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--fixed-batch", dest="fixed_batch", type=int, choices=[0, 1])
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run key-frame inference over a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default="")
    p.add_argument("--segment-length", dest="segment_length", type=int)
    p.add_argument("--encoding-range", dest="encoding_range", type=int)
    p.add_argument("--flow-source", dest="flow_source",
                   choices=["zero", "ground_truth", "learned"])
    p.add_argument("--proposal-source", dest="proposal_source",
                   choices=["ground_truth", "gt_jitter", "rpn", "file"])
    p.add_argument("--proposal-file", dest="proposal_file")
    p.add_argument("--temporal-mode", dest="temporal_mode", choices=["gru", "average"])
    p.add_argument("--warp-align", dest="warp_align", type=int, choices=[0, 1])
    p.add_argument("--streaming", type=int, choices=[0, 1])
    p.add_argument("--seed", type=int)
    p.add_argument("--time", type=int, choices=[0, 1],
                   help="1: record wall_ms (breaks byte determinism)")
    p.add_argument("--viz", type=int, choices=[0, 1])
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="an infer output directory")
    p.add_argument("--gt", required=True, help="a dataset directory")
    p.add_argument("--report", required=True, help="output JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="sweep segment lengths, report cost/accuracy")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default="")
    p.add_argument("--sweep-l", dest="sweep_l")
    p.add_argument("--encoding-range", dest="encoding_range", type=int)
    p.add_argument("--flow-source", dest="flow_source",
                   choices=["zero", "ground_truth", "learned"])
    p.add_argument("--proposal-source", dest="proposal_source",
                   choices=["ground_truth", "gt_jitter", "rpn", "file"])
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--report", required=True, help="output CSV path")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvariantBreach as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
