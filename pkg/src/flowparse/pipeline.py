"""Key-frame pipeline orchestration.

A video splits into segments of length `segment_length`; only each
segment's median frame (the key frame) runs the full backbone.  Each key
frame's features are enriched by warping the `encoding_range` previous
keys' raw features onto it and folding them through the convGRU; every
other frame's features are produced by warping its key's encoded
features along the estimated flow.  Keys near the start of a video that
lack enough predecessors borrow the following keys instead.

Inference is two-phase (all raw key features first, then per-segment
processing); a streaming mode keeps only the feature window it needs and
produces identical outputs.  An instrumented run counts
multiply-accumulates per function class and feeds the per-segment cost
ratio against the per-frame baseline.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import flow as flowmod, gru as grumod, parsing
from .autodiff import Tape, backward, sgd_step
from .backbone import extract_features
from .costs import CostCounter, CostReport, approx_ratio, counting, exact_ratio, scope
from .errors import ContractViolation
from .model import Model


@dataclass
class PipelineConfig:
    segment_length: int = 3        # l: frames sharing one key frame
    encoding_range: int = 2        # p: former keys folded into the encoder
    flow_source: str = "ground_truth"   # zero | ground_truth | learned
    key_frame_policy: str = "median"
    proposal_source: str = "ground_truth"  # ground_truth | gt_jitter | rpn | file
    proposal_file: str | None = None
    warp_align: bool = True        # ablation: warp former keys before encoding
    temporal_mode: str = "gru"     # gru | average (encoder-free ablation)
    seed: int = 0

    def __post_init__(self):
        if self.segment_length < 1:
            raise ContractViolation(f"segment length must be >= 1, got {self.segment_length}")
        if self.encoding_range < 0:
            raise ContractViolation(f"encoding range must be >= 0, got {self.encoding_range}")
        if self.key_frame_policy != "median":
            raise ContractViolation(f"unknown key frame policy {self.key_frame_policy!r}")
        if self.flow_source not in ("zero", "ground_truth", "learned"):
            raise ContractViolation(f"unknown flow source {self.flow_source!r}")
        if self.temporal_mode not in ("gru", "average"):
            raise ContractViolation(f"unknown temporal mode {self.temporal_mode!r}")


@dataclass
class Segment:
    start: int
    stop: int   # exclusive
    key: int


def plan_segments(num_frames: int, config: PipelineConfig) -> list:
    """Partition [0, num_frames) into runs of `segment_length`; the key is
    each segment's median frame (a short tail keeps its own median)."""
    if num_frames < 1:
        raise ContractViolation(f"need at least one frame, got {num_frames}")
    l = config.segment_length
    segments = []
    for start in range(0, num_frames, l):
        stop = min(start + l, num_frames)
        key = start + (stop - start) // 2
        segments.append(Segment(start=start, stop=stop, key=key))
    return segments


def support_positions(num_keys: int, kappa: int, p: int) -> list:
    """Key-list positions encoded alongside key `kappa`.

    The p immediately preceding keys, ordered most distant first; when the
    video start leaves fewer than p predecessors the following keys fill
    the remaining slots (cold start).  The result is ordered by distance
    from `kappa`, farthest first, so the nearest support key enters the
    recurrence last.
    """
    former = list(range(max(0, kappa - p), kappa))
    missing = p - len(former)
    latter = list(range(kappa + 1, min(num_keys, kappa + 1 + missing)))
    chosen = former + latter
    return sorted(chosen, key=lambda pos: (-abs(pos - kappa), pos))


def _flow_source_for(model: Model, config: PipelineConfig, dataset):
    return flowmod.make_flow_source(
        config.flow_source,
        feature_channels=model.config.channels,
        dataset=dataset,
        params=model.flow,
    )


def _proposals_for(frame_index: int, dataset, config: PipelineConfig, frame_hw):
    kind = config.proposal_source
    gt_boxes = [g["box"] for g in dataset.gt_instances(frame_index)]
    if kind == "ground_truth":
        return np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if kind == "gt_jitter":
        rng = np.random.default_rng([config.seed, frame_index])
        return parsing.gt_jitter_proposals(gt_boxes, frame_hw, rng)
    if kind == "file":
        if not config.proposal_file:
            raise ContractViolation("proposal_source=file needs proposal_file")
        return parsing.file_proposals(config.proposal_file, frame_index)
    if kind == "rpn":
        return None  # resolved against the feature map at parse time
    raise ContractViolation(f"unknown proposal source {kind!r}")


def _parse_frame(model: Model, feature_node, frame_index: int, dataset,
                 config: PipelineConfig, frame_hw):
    """Run both head branches on an encoded feature and fuse the results."""
    with scope("parse"):
        logits = parsing.global_parsing(feature_node, model.head)
        labels = parsing.label_map(logits)
        proposals = _proposals_for(frame_index, dataset, config, frame_hw)
        if proposals is None:
            proposals = parsing.rpn_proposals(feature_node, model.head, frame_hw)
        dets = parsing.instance_branch(feature_node, proposals, model.head, frame_hw)
        fused = parsing.fuse(dets, labels,
                             model.head.config.fill_background_with_majority)
    return {"frame": frame_index, "global_parts": labels, "instances": fused}


def _encode_one_key(model: Model, config: PipelineConfig, dataset, source,
                    keys: list, kappa: int, raw_features: dict) -> np.ndarray:
    """Warp the support keys onto key `kappa`, fold through the encoder, and
    return the encoded feature values."""
    tape = Tape()
    k = keys[kappa]
    current = tape.leaf(raw_features[k])
    former = []
    for pos in support_positions(len(keys), kappa, config.encoding_range):
        j = keys[pos]
        feat = tape.leaf(raw_features[j])
        if config.warp_align:
            with scope("flow"):
                fl, sc = flowmod.estimate_flow(tape, dataset.frame(k), dataset.frame(j), source)
        else:
            h, w = feat.shape[1:]
            fl = tape.leaf(np.zeros((2, h, w)))
            sc = tape.leaf(np.ones((feat.shape[0], h, w)))
        former.append((feat, fl, sc))
    encoded = grumod.encode_key(current, former, model.gru,
                                temporal_mode=config.temporal_mode)
    return encoded.data


def infer_sequence(model: Model, dataset, config: PipelineConfig,
                   frame_indices=None, streaming: bool = False) -> list:
    """Algorithm-style inference over a frame range; returns per-frame results.

    Two-phase by default: extract every key's raw features, then process
    segments in order.  `streaming=True` bounds memory by dropping raw key
    features once outside the encoding window; outputs are identical.
    """
    if frame_indices is None:
        frame_indices = list(range(dataset.num_frames))
    n = len(frame_indices)
    if n < 1:
        raise ContractViolation("empty video")
    frame_hw = (dataset.height, dataset.width)
    plan = plan_segments(n, config)
    keys = [seg.key for seg in plan]
    source = _flow_source_for(model, config, dataset)

    def raw_feature(local_idx: int) -> np.ndarray:
        tape = Tape()
        frame = dataset.frame(frame_indices[local_idx])
        with scope("feat"):
            return extract_features(tape.leaf(frame.image), model.backbone).data

    raw_features: dict = {}
    if not streaming:
        for k in keys:
            raw_features[k] = raw_feature(k)

    results = [None] * n
    window = config.encoding_range
    for kappa, seg in enumerate(plan):
        if streaming:
            # raw features for every key this segment can reference
            for pos in support_positions(len(keys), kappa, window) + [kappa]:
                if keys[pos] not in raw_features:
                    raw_features[keys[pos]] = raw_feature(keys[pos])
            # drop keys no segment >= kappa can reference again
            reachable = set()
            for future in range(kappa, len(keys)):
                reachable.update(keys[pos] for pos in
                                 support_positions(len(keys), future, window))
                reachable.add(keys[future])
            for stale in [k for k in raw_features if k not in reachable]:
                del raw_features[stale]

        k = seg.key
        encoded = _encode_one_key(model, config, dataset, source, keys, kappa,
                                  raw_features)

        tape = Tape()
        enc_node = tape.leaf(encoded)
        results[k] = _parse_frame(model, enc_node, frame_indices[k], dataset,
                                  config, frame_hw)
        results[k]["key"] = frame_indices[k]

        for t in range(seg.start, seg.stop):
            if t == k:
                continue
            tape_t = Tape()
            enc_t = tape_t.leaf(encoded)
            with scope("flow"):
                fl, sc = flowmod.estimate_flow(
                    tape_t, dataset.frame(frame_indices[t]),
                    dataset.frame(frame_indices[k]), source)
            with scope("warp"):
                warped = flowmod.propagate(enc_t, fl, sc)
            results[t] = _parse_frame(model, warped, frame_indices[t], dataset,
                                      config, frame_hw)
            results[t]["key"] = frame_indices[k]
    return results


def infer_per_frame_baseline(model: Model, dataset, config: PipelineConfig,
                             frame_indices=None) -> list:
    """Per-frame reference path: full backbone plus a single recurrent step
    per frame, then the head.  The degenerate pipeline (l=1, p=0) must
    reproduce this bitwise."""
    if frame_indices is None:
        frame_indices = list(range(dataset.num_frames))
    frame_hw = (dataset.height, dataset.width)
    results = []
    for idx in frame_indices:
        tape = Tape()
        frame = dataset.frame(idx)
        with scope("feat"):
            feat = extract_features(tape.leaf(frame.image), model.backbone)
        encoded = grumod.encode_key(feat, [], model.gru)
        out = _parse_frame(model, encoded, idx, dataset, config, frame_hw)
        out["key"] = idx
        results.append(out)
    return results


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------


def measure_unit_costs(model: Model, dataset, config: PipelineConfig) -> dict:
    """Per-call MAC costs of each function class on this dataset's shapes.

    gru is the cost of one full temporal encoding (p+1 recurrent steps);
    parse is one head evaluation on the first frame.
    """
    source = _flow_source_for(model, config, dataset)
    frame_hw = (dataset.height, dataset.width)
    frame0 = dataset.frame(0)
    frame1 = dataset.frame(min(1, dataset.num_frames - 1))
    units = {}

    counter = CostCounter()
    with counting(counter):
        tape = Tape()
        with scope("feat"):
            feat = extract_features(tape.leaf(frame0.image), model.backbone)
    units["feat"] = counter.macs["feat"]

    counter = CostCounter()
    with counting(counter):
        tape = Tape()
        with scope("flow"):
            fl, sc = flowmod.estimate_flow(tape, frame1, frame0, source)
    units["flow"] = counter.macs["flow"]

    counter = CostCounter()
    with counting(counter):
        tape = Tape()
        feat_node = tape.leaf(feat.data)
        h, w = feat.data.shape[1:]
        fl = tape.leaf(np.zeros((2, h, w)))
        sc = tape.leaf(np.ones((feat.data.shape[0], h, w)))
        with scope("warp"):
            flowmod.propagate(feat_node, fl, sc)
    units["warp"] = counter.macs["warp"]

    counter = CostCounter()
    with counting(counter):
        tape = Tape()
        current = tape.leaf(feat.data)
        former = []
        for _ in range(config.encoding_range):
            former.append((tape.leaf(feat.data),
                           tape.leaf(np.zeros((2, h, w))),
                           tape.leaf(np.ones((feat.data.shape[0], h, w)))))
        grumod.encode_key(current, former, model.gru, temporal_mode=config.temporal_mode)
    units["gru"] = counter.macs["gru"]

    counter = CostCounter()
    with counting(counter):
        tape = Tape()
        _parse_frame(model, tape.leaf(feat.data), 0, dataset, config, frame_hw)
    units["parse"] = counter.macs["parse"]
    return units


def cost_ratio(report: CostReport, config: PipelineConfig):
    """(exact, approximate) per-segment cost ratios from measured unit costs."""
    units = report.unit_costs
    if not units:
        raise ContractViolation("cost report carries no unit costs")
    ex = exact_ratio(units, config.segment_length, config.encoding_range)
    ap = approx_ratio(units, config.segment_length, config.encoding_range)
    return ex, ap


def instrumented_inference(model: Model, dataset, config: PipelineConfig,
                           frame_indices=None, with_timing: bool = False,
                           streaming: bool = False):
    """Inference plus a CostReport: counted MACs, predicted per-segment
    ratios, and the measured pipeline/baseline MAC ratio."""
    counter = CostCounter()
    t0 = time.perf_counter()
    with counting(counter):
        results = infer_sequence(model, dataset, config, frame_indices,
                                 streaming=streaming)
    wall_pipeline = (time.perf_counter() - t0) * 1000.0

    base_counter = CostCounter()
    t0 = time.perf_counter()
    with counting(base_counter):
        infer_per_frame_baseline(model, dataset, config, frame_indices)
    wall_baseline = (time.perf_counter() - t0) * 1000.0

    units = measure_unit_costs(model, dataset, config)
    report = CostReport(
        counts=dict(counter.macs),
        calls=dict(counter.calls),
        unit_costs=units,
    )
    report.r_exact, report.r_approx = cost_ratio(report, config)
    total = counter.total()
    base_total = base_counter.total()
    report.measured_r = total / base_total if base_total else float("nan")
    if with_timing:
        report.wall_ms = {"pipeline": wall_pipeline, "baseline": wall_baseline}
    return results, report


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def sample_training_batch(dataset, config: PipelineConfig, rng: np.random.Generator,
                          num_frames: int | None = None) -> dict:
    """One training window: p former keys, the current key, and a target
    frame drawn from the key's segment."""
    n = num_frames if num_frames is not None else dataset.num_frames
    plan = plan_segments(n, config)
    keys = [seg.key for seg in plan]
    kappa = int(rng.integers(0, len(keys)))
    seg = plan[kappa]
    t = int(rng.integers(seg.start, seg.stop))
    former = [keys[pos] for pos in
              support_positions(len(keys), kappa, config.encoding_range)]
    return {"former_keys": former, "key": keys[kappa], "target": t}


@dataclass
class TrainStepResult:
    breakdown: parsing.LossBreakdown
    batch: dict


def train_step(model: Model, dataset, config: PipelineConfig, batch: dict,
               lr: float, proposal_rng: np.random.Generator,
               update: bool = True) -> TrainStepResult:
    """Forward the sampled window, backprop the multi-task loss, take one
    SGD step.  Gradients reach every sub-network the configuration wires
    in (backbone through the warp, GRU, head, and the learned flow
    stack when selected)."""
    source = _flow_source_for(model, config, dataset)
    frame_hw = (dataset.height, dataset.width)
    k, t = batch["key"], batch["target"]

    tape = Tape()
    current = extract_features(tape.leaf(dataset.frame(k).image), model.backbone)
    former = []
    for j in batch["former_keys"]:
        feat = extract_features(tape.leaf(dataset.frame(j).image), model.backbone)
        if config.warp_align:
            fl, sc = flowmod.estimate_flow(tape, dataset.frame(k), dataset.frame(j), source)
        else:
            h, w = feat.shape[1:]
            fl = tape.leaf(np.zeros((2, h, w)))
            sc = tape.leaf(np.ones((feat.shape[0], h, w)))
        former.append((feat, fl, sc))
    encoded = grumod.encode_key(current, former, model.gru,
                                temporal_mode=config.temporal_mode)

    if t != k:
        fl, sc = flowmod.estimate_flow(tape, dataset.frame(t), dataset.frame(k), source)
        target_feat = flowmod.propagate(encoded, fl, sc)
    else:
        target_feat = encoded

    logits = parsing.global_parsing(target_feat, model.head)
    gt_instances = dataset.gt_instances(t)
    gt_parts = dataset.part_labels(t)
    proposals = parsing.gt_jitter_proposals(
        [g["box"] for g in gt_instances], frame_hw, proposal_rng)
    boxes, outputs = parsing.forward_rois(target_feat, proposals, model.head, frame_hw)
    breakdown = parsing.multitask_loss(logits, gt_parts, boxes, outputs,
                                       gt_instances, model.head)

    total = breakdown.total_node
    if config.proposal_source == "rpn":
        # auxiliary objectness supervision, reported outside the breakdown
        aux = parsing.rpn_objectness_loss(target_feat, model.head,
                                          [g["box"] for g in gt_instances], frame_hw)
        from . import ops
        total = ops.add(total, aux)

    if update:
        grads = backward(tape, total, model.store)
        sgd_step(model.store, grads, lr)
    return TrainStepResult(breakdown=breakdown, batch=batch)


def train(model: Model, dataset, config: PipelineConfig, steps: int, lr: float,
          seed: int = 0, fixed_batch: bool = False) -> list:
    """SGD over randomly sampled windows; returns per-step loss breakdowns."""
    sampler = np.random.default_rng([seed, 101])
    proposal_rng = np.random.default_rng([seed, 202])
    history = []
    batch = sample_training_batch(dataset, config, sampler)
    for step in range(steps):
        if fixed_batch:
            # freeze the proposal jitter too, so the training example is
            # literally identical every step
            proposal_rng = np.random.default_rng([seed, 202])
        elif step > 0:
            batch = sample_training_batch(dataset, config, sampler)
        result = train_step(model, dataset, config, batch, lr, proposal_rng)
        history.append(result.breakdown)
    return history
