"""Scratch calibration for the ablation and trend experiments (not shipped)."""

import sys
import time
import warnings
from pathlib import Path

import numpy as np

sys.path.insert(0, "src")
warnings.filterwarnings("ignore", category=RuntimeWarning)

from flowparse import metrics, pipeline as pl
from flowparse.model import ModelConfig, init_model
from flowparse.synthdata import Dataset, SyntheticScene, generate

TMP = Path("/tmp/calib")


def key_frames(num_frames, l):
    return [s.key for s in pl.plan_segments(num_frames, pl.PipelineConfig(segment_length=l))]


def make_ablation_dataset(seed, l=3, frames=12, size=48):
    keys = key_frames(frames, l)
    scene = SyntheticScene(
        seed=seed, num_frames=frames, height=size, width=size,
        num_instances=2, max_velocity=3.0,
        degrade_frames=tuple(keys), blur_sigma=1.2, noise_sigma=0.10,
    )
    out = TMP / f"abl_{seed}"
    generate(scene, out)
    return Dataset(out)


def miou_of(model, ds, config):
    results = pl.infer_sequence(model, ds, config)
    pred = [r["global_parts"] for r in results]
    gt = [ds.part_labels(t) for t in range(ds.num_frames)]
    _per, m = metrics.mean_iou(pred, gt, ds.num_part_classes)
    return m


def run_ablation(seed, steps=300, lr=2e-3, size=48):
    t0 = time.time()
    ds = make_ablation_dataset(seed, size=size)
    model = init_model(ModelConfig(num_part_classes=ds.num_part_classes,
                                   channels=16, depth=2, init_seed=seed))
    config = pl.PipelineConfig(segment_length=3, encoding_range=2,
                               flow_source="ground_truth",
                               proposal_source="ground_truth")
    pl.train(model, ds, config, steps=steps, lr=lr, seed=seed)
    t_train = time.time() - t0

    full = miou_of(model, ds, config)
    no_warp = miou_of(model, ds, pl.PipelineConfig(
        segment_length=3, encoding_range=2, flow_source="ground_truth",
        proposal_source="ground_truth", warp_align=False))
    no_gru = miou_of(model, ds, pl.PipelineConfig(
        segment_length=3, encoding_range=2, flow_source="ground_truth",
        proposal_source="ground_truth", temporal_mode="average"))
    print(f"seed {seed}: full={full:.4f} no_warp={no_warp:.4f} no_gru={no_gru:.4f} "
          f"margin_warp={full-no_warp:+.4f} margin_gru={full-no_gru:+.4f} "
          f"(train {t_train:.0f}s)")
    return full - no_warp, full - no_gru


def run_trend(steps=300, lr=2e-3):
    scene = SyntheticScene(seed=0, num_frames=30, height=48, width=48,
                           num_instances=2, max_velocity=3.0)
    out = TMP / "trend"
    generate(scene, out)
    ds = Dataset(out)
    model = init_model(ModelConfig(num_part_classes=ds.num_part_classes,
                                   channels=16, depth=2, init_seed=0))
    train_cfg = pl.PipelineConfig(segment_length=3, encoding_range=2,
                                  flow_source="ground_truth",
                                  proposal_source="ground_truth")
    t0 = time.time()
    pl.train(model, ds, train_cfg, steps=steps, lr=lr, seed=0)
    print(f"trend train: {time.time()-t0:.0f}s")
    for l in (3, 5):
        cfg = pl.PipelineConfig(segment_length=l, encoding_range=2,
                                flow_source="ground_truth",
                                proposal_source="ground_truth")
        t0 = time.time()
        m = miou_of(model, ds, cfg)
        wall = time.time() - t0
        print(f"  l={l}: miou={m:.4f} wall={wall:.2f}s")


def run_training_convergence(lr=1e-3, steps=200):
    scene = SyntheticScene(seed=0, num_frames=9, height=48, width=48,
                           num_instances=2, max_velocity=2.0)
    out = TMP / "conv"
    generate(scene, out)
    ds = Dataset(out)
    model = init_model(ModelConfig(num_part_classes=ds.num_part_classes,
                                   channels=16, depth=2, init_seed=0))
    config = pl.PipelineConfig(segment_length=3, encoding_range=2,
                               flow_source="ground_truth")
    t0 = time.time()
    hist = pl.train(model, ds, config, steps=steps, lr=lr, seed=0, fixed_batch=True)
    print(f"convergence lr={lr}: initial={hist[0].total:.4f} "
          f"final={hist[-1].total:.4f} ratio={hist[-1].total/hist[0].total:.3f} "
          f"({time.time()-t0:.0f}s, {steps} steps)")


if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "all"
    if which in ("all", "conv"):
        run_training_convergence()
    if which in ("all", "abl"):
        for seed in (0, 1, 2):
            run_ablation(seed)
    if which in ("all", "trend"):
        run_trend()
