"""Evaluation protocols: mean IoU, instance AP, and volume-averaged AP.

Fixed interpretations (the oracle tests freeze these):

* mean IoU accumulates TP/FP/FN per class over all frames; classes absent
  from both prediction and ground truth are excluded from the mean;
  background (class 0) participates like any other class.
* AP uses score-descending greedy matching (each ground-truth instance
  matched at most once, best-overlap-first within a frame) and all-point
  interpolation of the precision-recall curve.  Human instance
  segmentation matches on plain mask IoU over thresholds 0.50..0.95 step
  0.05; instance-level parsing matches on part-aware IoU (mean of
  per-part-class IoUs within the matched pair) over thresholds 0.1..0.9
  step 0.1, and the volume score is the mean of those nine mAPs.
* Empty ground truth with empty predictions scores AP = 1.0 by
  convention and is flagged in the report.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ContractViolation

AP_R_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))
AP_R_REPORT_AT = (0.5, 0.6, 0.7)
AP_VOL_THRESHOLDS = tuple(np.round(np.arange(0.1, 0.91, 0.1), 1))


def mean_iou(pred_maps, gt_maps, num_classes: int):
    """Per-class and mean IoU over aligned label-map sequences.

    `num_classes` counts the part classes; label values live in
    [0, num_classes] including background 0.
    """
    pred_maps, gt_maps = list(pred_maps), list(gt_maps)
    if len(pred_maps) != len(gt_maps):
        raise ContractViolation("prediction and ground-truth frame counts differ")
    k1 = num_classes + 1
    tp = np.zeros(k1, dtype=np.int64)
    fp = np.zeros(k1, dtype=np.int64)
    fn = np.zeros(k1, dtype=np.int64)
    for pred, gt in zip(pred_maps, gt_maps):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ContractViolation(f"label map dims differ: {pred.shape} vs {gt.shape}")
        if pred.max(initial=0) > num_classes or gt.max(initial=0) > num_classes:
            raise ContractViolation("label values exceed the class range")
        for c in range(k1):
            pc = pred == c
            gc = gt == c
            tp[c] += np.count_nonzero(pc & gc)
            fp[c] += np.count_nonzero(pc & ~gc)
            fn[c] += np.count_nonzero(~pc & gc)
    per_class = {}
    for c in range(k1):
        denom = tp[c] + fp[c] + fn[c]
        if denom == 0:
            continue  # absent from both; excluded from the mean
        per_class[c] = float(tp[c] / denom)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a | b)
    return inter / union if union else 0.0


def part_aware_iou(pred, gt) -> float:
    """Mean of per-part-class IoUs between two instance parsings.

    Classes present in either side participate; if neither side carries a
    nonbackground label the plain mask IoU is used as a degenerate
    fallback.
    """
    classes = np.union1d(np.unique(pred["parts"]), np.unique(gt["parts"]))
    classes = classes[classes != 0]
    if len(classes) == 0:
        return mask_iou(pred["mask"], gt["mask"])
    vals = []
    for c in classes:
        vals.append(mask_iou(pred["parts"] == c, gt["parts"] == c))
    return float(np.mean(vals))


def _average_precision(matches, num_gt: int):
    """All-point interpolated AP from a score-ranked TP/FP sequence."""
    if num_gt == 0:
        return (1.0, True) if len(matches) == 0 else (0.0, False)
    if len(matches) == 0:
        return 0.0, False
    tps = np.cumsum(matches)
    ranks = np.arange(1, len(matches) + 1)
    precision = tps / ranks
    recall = tps / num_gt
    # envelope: precision at recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for i in range(len(matches)):
        if matches[i]:
            ap += (recall[i] - prev_r) * env[i]
            prev_r = recall[i]
    return float(ap), False


def _match_frame(preds, gts, threshold: float, iou_fn):
    """Greedy per-frame matching in score order; yields (score, is_tp)."""
    taken = [False] * len(gts)
    results = []
    for pred in sorted(preds, key=lambda p: -p["score"]):
        best, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            overlap = iou_fn(pred, gt)
            if overlap > best:
                best, best_j = overlap, j
        if best_j >= 0 and best >= threshold:
            taken[best_j] = True
            results.append((pred["score"], True))
        else:
            results.append((pred["score"], False))
    return results


def _ap_at(preds_per_frame, gts_per_frame, threshold: float, iou_fn):
    scored = []
    num_gt = 0
    for preds, gts in zip(preds_per_frame, gts_per_frame):
        num_gt += len(gts)
        scored.extend(_match_frame(preds, gts, threshold, iou_fn))
    scored.sort(key=lambda t: -t[0])
    matches = [m for _s, m in scored]
    return _average_precision(matches, num_gt)


def ap_r(preds_per_frame, gts_per_frame, thresholds=AP_R_THRESHOLDS):
    """Mask-IoU average precision per threshold plus the threshold mean.

    Instances are dicts with `score` and boolean `mask`.  Returns
    (per_threshold dict, mean, empty_vs_empty_flag).
    """
    iou_fn = lambda p, g: mask_iou(p["mask"], g["mask"])
    per = {}
    flagged = False
    for t in thresholds:
        ap, flag = _ap_at(preds_per_frame, gts_per_frame, float(t), iou_fn)
        per[float(t)] = ap
        flagged = flagged or flag
    mean = float(np.mean(list(per.values())))
    return per, mean, flagged


def ap_r_vol(preds_per_frame, gts_per_frame, thresholds=AP_VOL_THRESHOLDS):
    """Mean of part-aware mAPs over the volume thresholds."""
    per = {}
    flagged = False
    for t in thresholds:
        ap, flag = _ap_at(preds_per_frame, gts_per_frame, float(t), part_aware_iou)
        per[float(t)] = ap
        flagged = flagged or flag
    return per, float(np.mean(list(per.values()))), flagged


def evaluate(preds_per_frame, gts_per_frame, pred_parts_maps, gt_parts_maps,
             num_classes: int) -> dict:
    """Full report with the exact published key names."""
    per_class, miou = mean_iou(pred_parts_maps, gt_parts_maps, num_classes)
    ap_per, ap_mean, flag_r = ap_r(preds_per_frame, gts_per_frame)
    vol_per, vol_mean, flag_v = ap_r_vol(preds_per_frame, gts_per_frame)
    return {
        "mean_iou": miou,
        "iou_per_class": {str(c): v for c, v in per_class.items()},
        "ap_r": ap_mean,
        "ap_r_thresholds": {f"{t:.2f}": ap_per[t] for t in sorted(ap_per)},
        "ap_r_report_at": {f"{t:.1f}": ap_per[t] for t in AP_R_REPORT_AT},
        "ap_r_vol": vol_mean,
        "ap_r_vol_thresholds": {f"{t:.1f}": vol_per[t] for t in sorted(vol_per)},
        "empty_vs_empty_flagged": bool(flag_r or flag_v),
    }


def write_report(path, report: dict) -> None:
    from pathlib import Path

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
