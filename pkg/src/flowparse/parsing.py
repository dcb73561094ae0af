"""Two-branch instance parsing head.

The global branch classifies every pixel into part classes with three
parallel dilated convolutions (summed, then upsampled to frame
resolution).  The instance branch scores box proposals, refines them and
predicts a binary mask per accepted box.  Fusing the two restricts the
global part labels to each instance's mask, giving per-person part maps.

Proposals are pluggable: jittered ground-truth boxes (training default),
a small anchor-scoring objectness head, or boxes from an external JSON
file.  Anchor arithmetic keeps the scales-times-ratios grid so the
anchor count per location is configurable (15 with the defaults).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops, tensorio
from .autodiff import Node
from .errors import ContractViolation, DataError

BACKGROUND = 0


@dataclass
class AnchorConfig:
    scales: tuple = (8.0, 16.0, 32.0, 64.0, 128.0)
    ratios: tuple = (0.5, 1.0, 2.0)

    def __post_init__(self):
        if not self.scales or not self.ratios:
            raise ContractViolation("anchor scales and ratios must be non-empty")

    @property
    def per_location(self) -> int:
        return len(self.scales) * len(self.ratios)


@dataclass
class HeadConfig:
    num_part_classes: int
    atrous_rates: tuple = (6, 12, 18)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    roi_size: int = 7
    mask_size: int = 14
    stride: int = 4
    score_threshold: float = 0.5
    nms_iou: float = 0.5
    fill_background_with_majority: bool = False


@dataclass
class HeadParams:
    config: HeadConfig
    atrous: list            # one ConvKernel per dilation rate, C -> K+1
    roi_convs: list         # ConvKernels on ROI features
    cls_head: ops.ConvKernel    # 1x1 on pooled ROI features -> 2
    box_head: ops.ConvKernel    # 1x1 on pooled ROI features -> 4
    mask_convs: list        # ConvKernels on mask-branch ROI features
    mask_out: ops.ConvKernel    # 1x1 -> 1 mask logit channel
    rpn_obj: ops.ConvKernel     # 1x1 -> anchors-per-location objectness


def init_head(store, feature_channels: int, config: HeadConfig,
              rng: np.random.Generator, prefix: str = "head") -> HeadParams:
    c = feature_channels
    k1 = config.num_part_classes + 1
    atrous = [
        ops.make_kernel(store, f"{prefix}.atrous{i}", c, k1, 3, rng, dilation=int(rate))
        for i, rate in enumerate(config.atrous_rates)
    ]
    roi_convs = [
        ops.make_kernel(store, f"{prefix}.roi0", c, c, 3, rng),
        ops.make_kernel(store, f"{prefix}.roi1", c, c, 3, rng),
    ]
    mask_convs = [
        ops.make_kernel(store, f"{prefix}.mask0", c, c, 3, rng),
        ops.make_kernel(store, f"{prefix}.mask1", c, c, 3, rng),
    ]
    return HeadParams(
        config=config,
        atrous=atrous,
        roi_convs=roi_convs,
        cls_head=ops.make_kernel(store, f"{prefix}.cls", c, 2, 1, rng),
        box_head=ops.make_kernel(store, f"{prefix}.box", c, 4, 1, rng, weight_scale=0.1),
        mask_convs=mask_convs,
        mask_out=ops.make_kernel(store, f"{prefix}.mask_out", c, 1, 1, rng),
        rpn_obj=ops.make_kernel(store, f"{prefix}.rpn_obj", c,
                                config.anchors.per_location, 1, rng),
    )


# ---------------------------------------------------------------------------
# global parsing branch
# ---------------------------------------------------------------------------


def effective_rates(rates, h: int, w: int):
    """Scale dilation rates down proportionally when the feature map is too
    small for the largest one."""
    rates = [int(r) for r in rates]
    limit = min(h, w) - 1
    top = max(rates)
    if top <= limit:
        return rates
    scaled = [max(1, round(r * limit / top)) for r in rates]
    warnings.warn(
        f"feature map {h}x{w} too small for dilation rates {rates}; using {scaled}",
        RuntimeWarning,
        stacklevel=2,
    )
    return scaled


def global_parsing(feature: Node, params: HeadParams) -> Node:
    """Frame-resolution part logits: summed dilated branches, upsampled x4."""
    _c, h, w = feature.shape
    rates = effective_rates(params.config.atrous_rates, h, w)
    fused = None
    for kern, rate in zip(params.atrous, rates):
        branch = ops.conv2d(feature, ops.ConvKernel(kern.weight, kern.bias, dilation=rate))
        fused = branch if fused is None else ops.add(fused, branch)
    return ops.upsample_bilinear(fused, params.config.stride)


def label_map(logits: Node) -> np.ndarray:
    """Argmax part labels from (K+1,H,W) logits."""
    return logits.data.argmax(axis=0).astype(np.uint8)


# ---------------------------------------------------------------------------
# anchors and proposals
# ---------------------------------------------------------------------------


def generate_anchors(config: AnchorConfig, feature_hw, stride: int = 4) -> np.ndarray:
    """(h*w*A, 4) anchor boxes in frame pixels, centered on each feature
    location's frame-space center; area is scale^2 at every aspect ratio."""
    h, w = feature_hw
    if h < 1 or w < 1:
        raise ContractViolation(f"feature dims must be positive, got {feature_hw}")
    shapes = []
    for s in config.scales:
        for r in config.ratios:
            bw = s * np.sqrt(r)
            bh = s / np.sqrt(r)
            shapes.append((bw, bh))
    shapes = np.asarray(shapes)
    cy = (np.arange(h) + 0.5) * stride
    cx = (np.arange(w) + 0.5) * stride
    boxes = np.empty((h, w, len(shapes), 4))
    boxes[..., 0] = cx[None, :, None] - shapes[:, 0] / 2
    boxes[..., 1] = cy[:, None, None] - shapes[:, 1] / 2
    boxes[..., 2] = cx[None, :, None] + shapes[:, 0] / 2
    boxes[..., 3] = cy[:, None, None] + shapes[:, 1] / 2
    return boxes.reshape(-1, 4)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N,4) and (M,4) boxes."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    x0 = np.maximum(a[:, None, 0], b[None, :, 0])
    y0 = np.maximum(a[:, None, 1], b[None, :, 1])
    x1 = np.minimum(a[:, None, 2], b[None, :, 2])
    y1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x1 - x0, 0, None) * np.clip(y1 - y0, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def gt_jitter_proposals(gt_boxes, frame_hw, rng: np.random.Generator,
                        jitter: float = 0.15, negatives: int = 2) -> np.ndarray:
    """Training proposals: ground-truth boxes, jittered copies, and a few
    random background boxes."""
    H, W = frame_hw
    out = []
    for box in gt_boxes:
        x0, y0, x1, y1 = box
        bw, bh = x1 - x0, y1 - y0
        out.append([x0, y0, x1, y1])
        for _ in range(2):
            dx, dy = rng.normal(0, jitter * bw), rng.normal(0, jitter * bh)
            sw, sh = rng.uniform(1 - jitter, 1 + jitter, size=2)
            cx, cy = (x0 + x1) / 2 + dx, (y0 + y1) / 2 + dy
            out.append([cx - sw * bw / 2, cy - sh * bh / 2,
                        cx + sw * bw / 2, cy + sh * bh / 2])
    for _ in range(negatives):
        bw, bh = rng.uniform(W / 6, W / 2), rng.uniform(H / 6, H / 2)
        x0 = rng.uniform(0, W - bw)
        y0 = rng.uniform(0, H - bh)
        out.append([x0, y0, x0 + bw, y0 + bh])
    boxes = np.asarray(out) if out else np.zeros((0, 4))
    return clip_boxes(boxes, frame_hw)


def rpn_proposals(feature: Node, params: HeadParams, frame_hw, topk: int = 16) -> np.ndarray:
    """Anchor-scoring proposals: objectness from a 1x1 head, top-k anchors."""
    h, w = feature.shape[1], feature.shape[2]
    logits = ops.conv2d(feature, params.rpn_obj)  # (A, h, w)
    anchors = generate_anchors(params.config.anchors, (h, w), params.config.stride)
    scores = np.transpose(logits.data, (1, 2, 0)).reshape(-1)  # (y, x, a) order
    order = np.argsort(-scores, kind="stable")[:topk]
    return clip_boxes(anchors[order], frame_hw)


def rpn_objectness_loss(feature: Node, params: HeadParams, gt_boxes, frame_hw) -> Node:
    """Auxiliary BCE for the anchor-scoring head: an anchor is positive when
    it overlaps any ground-truth box at IoU >= 0.5.  Kept outside the
    multi-task breakdown; only used when training with RPN proposals."""
    h, w = feature.shape[1], feature.shape[2]
    logits = ops.conv2d(feature, params.rpn_obj)
    anchors = generate_anchors(params.config.anchors, (h, w), params.config.stride)
    if len(gt_boxes):
        iou = box_iou(anchors, np.asarray(gt_boxes)).max(axis=1)
    else:
        iou = np.zeros(len(anchors))
    targets = (iou >= 0.5).astype(np.float64)
    targets = targets.reshape(h, w, -1).transpose(2, 0, 1)
    return ops.bce_logits(logits, targets)


def file_proposals(path, frame_index: int) -> np.ndarray:
    """External proposals: JSON mapping frame index -> list of boxes."""
    blob = json.loads(Path(path).read_text())
    boxes = blob.get(str(frame_index), [])
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def clip_boxes(boxes: np.ndarray, frame_hw) -> np.ndarray:
    H, W = frame_hw
    out = boxes.copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0, W)
    out[:, 1::2] = np.clip(out[:, 1::2], 0, H)
    return out


# ---------------------------------------------------------------------------
# instance branch
# ---------------------------------------------------------------------------


def _roi_features(feature: Node, fbox, params: HeadParams):
    """Shared ROI tower: cls/box features (pooled) and mask features."""
    cfg = params.config
    roi = ops.roi_align(feature, fbox, (cfg.roi_size, cfg.roi_size))
    for kern in params.roi_convs:
        roi = ops.relu(ops.conv2d(roi, kern))
    pooled = ops.spatial_mean(roi)
    cls_logits = ops.reshape(ops.conv2d(pooled, params.cls_head), (1, 2))
    box_deltas = ops.reshape(ops.conv2d(pooled, params.box_head), (1, 4))

    roi_m = ops.roi_align(feature, fbox, (cfg.mask_size, cfg.mask_size))
    for kern in params.mask_convs:
        roi_m = ops.relu(ops.conv2d(roi_m, kern))
    mask_logits = ops.conv2d(roi_m, params.mask_out)  # (1, m, m)
    return cls_logits, box_deltas, mask_logits


def forward_rois(feature: Node, proposals: np.ndarray, params: HeadParams, frame_hw):
    """Per-proposal head outputs; zero-area boxes (after clipping) are dropped.

    Returns (kept_boxes, outputs) where outputs[i] is a dict of nodes for
    kept_boxes[i].
    """
    stride = params.config.stride
    kept, outputs = [], []
    for box in clip_boxes(np.asarray(proposals, dtype=np.float64).reshape(-1, 4), frame_hw):
        x0, y0, x1, y1 = box
        if x1 - x0 <= 1e-6 or y1 - y0 <= 1e-6:
            continue  # rejected: zero area after clipping
        fbox = (x0 / stride, y0 / stride, x1 / stride, y1 / stride)
        cls_logits, box_deltas, mask_logits = _roi_features(feature, fbox, params)
        kept.append(box)
        outputs.append({"cls": cls_logits, "box": box_deltas, "mask": mask_logits})
    return np.asarray(kept).reshape(-1, 4), outputs


def apply_deltas(box, deltas):
    """Standard center/size parameterization; deltas (dx, dy, dw, dh)."""
    x0, y0, x1, y1 = box
    bw, bh = x1 - x0, y1 - y0
    cx, cy = x0 + bw / 2, y0 + bh / 2
    dx, dy, dw, dh = deltas
    # keep exp in a sane range for raw heads
    dw, dh = np.clip(dw, -2.0, 2.0), np.clip(dh, -2.0, 2.0)
    ncx, ncy = cx + dx * bw, cy + dy * bh
    nw, nh = bw * np.exp(dw), bh * np.exp(dh)
    return (ncx - nw / 2, ncy - nh / 2, ncx + nw / 2, ncy + nh / 2)


def box_deltas_for(proposal, gt_box):
    x0, y0, x1, y1 = proposal
    gx0, gy0, gx1, gy1 = gt_box
    bw, bh = x1 - x0, y1 - y0
    gw, gh = gx1 - gx0, gy1 - gy0
    return np.array([
        ((gx0 + gx1) / 2 - (x0 + x1) / 2) / bw,
        ((gy0 + gy1) / 2 - (y0 + y1) / 2) / bh,
        np.log(gw / bw),
        np.log(gh / bh),
    ])


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list:
    """Greedy suppression in score order; returns kept indices."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    for i in order:
        if all(box_iou(boxes[i], boxes[j])[0, 0] <= iou_threshold for j in keep):
            keep.append(int(i))
    return keep


def paste_mask(mask_logits: np.ndarray, box, frame_hw) -> np.ndarray:
    """Resample (1,m,m) mask logits into the clipped box; threshold at 0.5."""
    H, W = frame_hw
    x0, y0, x1, y1 = box
    x0c, y0c = max(0, int(np.floor(x0))), max(0, int(np.floor(y0)))
    x1c, y1c = min(W, int(np.ceil(x1))), min(H, int(np.ceil(y1)))
    out = np.zeros((H, W), dtype=bool)
    if x1c <= x0c or y1c <= y0c or x1 - x0 <= 0 or y1 - y0 <= 0:
        return out
    m = mask_logits.shape[-1]
    xs = np.arange(x0c, x1c) + 0.5
    ys = np.arange(y0c, y1c) + 0.5
    u = (xs - x0) / (x1 - x0) * m - 0.5
    v = (ys - y0) / (y1 - y0) * m - 0.5
    coords = np.empty((2, len(ys), len(xs)))
    coords[0] = np.broadcast_to(u[None, :], (len(ys), len(xs)))
    coords[1] = np.broadcast_to(v[:, None], (len(ys), len(xs)))
    probs = _sigmoid(ops.sample_bilinear_np(mask_logits, coords))[0]
    out[y0c:y1c, x0c:x1c] = probs >= 0.5
    return out


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def instance_branch(feature: Node, proposals: np.ndarray, params: HeadParams,
                    frame_hw) -> list:
    """Detections from proposals: refined box, person score, pasted mask.

    Empty proposals yield an empty set (valid).  Score-descending greedy
    suppression at the configured IoU keeps one of any duplicate pair.
    """
    cfg = params.config
    boxes, outputs = forward_rois(feature, proposals, params, frame_hw)
    if len(boxes) == 0:
        return []
    dets = []
    for box, out in zip(boxes, outputs):
        logits = out["cls"].data[0]
        shifted = logits - logits.max()
        probs = np.exp(shifted) / np.exp(shifted).sum()
        score = float(probs[1])
        if score < cfg.score_threshold:
            continue
        refined = apply_deltas(box, out["box"].data[0])
        refined = clip_boxes(np.asarray([refined]), frame_hw)[0]
        if refined[2] - refined[0] <= 1e-6 or refined[3] - refined[1] <= 1e-6:
            continue
        mask = paste_mask(out["mask"].data, refined, frame_hw)
        dets.append({"box": tuple(float(v) for v in refined), "score": score, "mask": mask})
    if not dets:
        return []
    all_boxes = np.asarray([d["box"] for d in dets])
    all_scores = np.asarray([d["score"] for d in dets])
    keep = nms(all_boxes, all_scores, cfg.nms_iou)
    dets = [dets[i] for i in keep]
    dets.sort(key=lambda d: -d["score"])
    return dets


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------


def fuse(instances: list, part_labels: np.ndarray,
         fill_background_with_majority: bool = False) -> list:
    """Restrict the global part labels to each instance mask.

    Contested pixels go to the highest-scoring instance.  Mask pixels the
    global branch called background stay background unless majority fill
    is enabled.
    """
    H, W = part_labels.shape
    order = sorted(range(len(instances)), key=lambda i: -instances[i]["score"])
    claimed = np.zeros((H, W), dtype=bool)
    fused = [None] * len(instances)
    for i in order:
        inst = instances[i]
        if inst["mask"].shape != (H, W):
            raise ContractViolation(
                f"instance mask {inst['mask'].shape} does not match frame {(H, W)}"
            )
        eff = inst["mask"] & ~claimed
        claimed |= eff
        parts = np.where(eff, part_labels, BACKGROUND).astype(np.uint8)
        if fill_background_with_majority:
            hole = eff & (parts == BACKGROUND)
            labels, counts = np.unique(parts[eff & (parts != BACKGROUND)], return_counts=True)
            if hole.any() and len(labels):
                parts[hole] = labels[counts.argmax()]
        fused[i] = {
            "box": inst["box"],
            "score": inst["score"],
            "mask": eff,
            "parts": parts,
        }
    return fused


# ---------------------------------------------------------------------------
# multi-task loss
# ---------------------------------------------------------------------------


@dataclass
class LossBreakdown:
    parsing: float
    cls: float
    box: float
    mask: float
    total: float
    total_node: Node

    def as_dict(self):
        return {
            "parsing": self.parsing, "cls": self.cls,
            "box": self.box, "mask": self.mask, "total": self.total,
        }


def assign_rois(proposals: np.ndarray, gt_instances: list, iou_threshold: float = 0.5):
    """Per-proposal training targets against ground-truth instances.

    Returns (labels, matched_gt_index): label 1 = person (IoU >= threshold
    with its best ground-truth box), 0 = background.
    """
    n = len(proposals)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if n == 0 or not gt_instances:
        return labels, matched
    gt_boxes = np.asarray([g["box"] for g in gt_instances])
    iou = box_iou(proposals, gt_boxes)
    best = iou.argmax(axis=1)
    best_iou = iou[np.arange(n), best]
    labels[best_iou >= iou_threshold] = 1
    matched[best_iou >= iou_threshold] = best[best_iou >= iou_threshold]
    return labels, matched


def mask_target_for(proposal, gt_mask: np.ndarray, mask_size: int) -> np.ndarray:
    """Ground-truth mask resampled onto the proposal's mask grid."""
    x0, y0, x1, y1 = proposal
    m = mask_size
    xs = x0 + (np.arange(m) + 0.5) * (x1 - x0) / m - 0.5
    ys = y0 + (np.arange(m) + 0.5) * (y1 - y0) / m - 0.5
    coords = np.empty((2, m, m))
    coords[0] = np.broadcast_to(xs[None, :], (m, m))
    coords[1] = np.broadcast_to(ys[:, None], (m, m))
    soft = ops.sample_bilinear_np(gt_mask[None].astype(np.float64), coords)[0]
    return (soft >= 0.5).astype(np.float64)


def multitask_loss(global_logits: Node, gt_parts: np.ndarray,
                   roi_boxes: np.ndarray, roi_outputs: list,
                   gt_instances: list, params: HeadParams) -> LossBreakdown:
    """parsing + cls + box + mask, unweighted.

    parsing: pixel-mean softmax CE on the frame-resolution part logits;
    cls: mean CE over ROIs; box: smooth-L1 on positive ROIs' deltas;
    mask: per-pixel BCE on positive ROIs.  With no ROIs the ROI terms
    contribute exactly zero and parsing-only training remains valid.
    """
    tape = global_logits.tape
    cfg = params.config
    parsing = ops.softmax_ce_spatial(global_logits, gt_parts.astype(np.int64))

    zero = lambda: tape.leaf(np.zeros(()))
    cls_loss, box_loss, mask_loss = zero(), zero(), zero()

    if len(roi_boxes):
        labels, matched = assign_rois(roi_boxes, gt_instances)
        terms = [ops.softmax_ce_rows(out["cls"], labels[i : i + 1])
                 for i, out in enumerate(roi_outputs)]
        acc = terms[0]
        for t in terms[1:]:
            acc = ops.add(acc, t)
        cls_loss = ops.scale(acc, 1.0 / len(terms))

        pos = [i for i in range(len(roi_boxes)) if labels[i] == 1]
        if pos:
            bterms, mterms = [], []
            for i in pos:
                gt = gt_instances[matched[i]]
                target = box_deltas_for(roi_boxes[i], gt["box"])
                bterms.append(ops.smooth_l1(roi_outputs[i]["box"], target[None, :]))
                mtarget = mask_target_for(roi_boxes[i], gt["mask"], cfg.mask_size)
                mterms.append(ops.bce_logits(roi_outputs[i]["mask"], mtarget[None]))
            bacc = bterms[0]
            for t in bterms[1:]:
                bacc = ops.add(bacc, t)
            box_loss = ops.scale(bacc, 1.0 / len(bterms))
            macc = mterms[0]
            for t in mterms[1:]:
                macc = ops.add(macc, t)
            mask_loss = ops.scale(macc, 1.0 / len(mterms))

    total = ops.add(ops.add(ops.add(parsing, cls_loss), box_loss), mask_loss)
    return LossBreakdown(
        parsing=float(parsing.data), cls=float(cls_loss.data),
        box=float(box_loss.data), mask=float(mask_loss.data),
        total=float(total.data), total_node=total,
    )


# ---------------------------------------------------------------------------
# prediction serialization
# ---------------------------------------------------------------------------


def save_frame_predictions(directory, fused: list, global_parts: np.ndarray) -> None:
    """Per-frame layout: instances.json (boxes, scores), one part-label PGM
    per instance, and the global part-label PGM."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "instances": [
            {"box": list(inst["box"]), "score": inst["score"]} for inst in fused
        ]
    }
    (directory / "instances.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n"
    )
    for i, inst in enumerate(fused):
        tensorio.write_pgm(directory / f"instance_{i:02d}.pgm", inst["parts"])
    tensorio.write_pgm(directory / "global_parts.pgm", global_parts)


def load_frame_predictions(directory) -> tuple:
    """Inverse of save_frame_predictions: (fused instances, global parts)."""
    directory = Path(directory)
    meta_path = directory / "instances.json"
    if not meta_path.exists():
        raise DataError(f"no predictions at {directory}")
    meta = json.loads(meta_path.read_text())
    fused = []
    for i, inst in enumerate(meta["instances"]):
        parts = tensorio.read_pgm(directory / f"instance_{i:02d}.pgm")
        fused.append({
            "box": tuple(inst["box"]),
            "score": float(inst["score"]),
            "mask": parts > 0,
            "parts": parts,
        })
    global_parts = tensorio.read_pgm(directory / "global_parts.pgm")
    return fused, global_parts
