"""Flow-guided feature propagation.

A flow field is a (2,h,w) displacement grid at feature resolution
(channel 0 horizontal, channel 1 vertical, units = feature pixels); a
scale field is a (C,h,w) multiplicative refinement with the same dims as
the features it corrects.  Propagation warps a reference feature map
backward along the flow, then multiplies by the scale field:

    propagated = warp(reference_features, identity + flow) . scale

Flow sources are pluggable: exact generator flow (isolates warping from
estimation quality), a small trainable conv stack on the downsampled
frame pair, or null motion.  The learned source's scale head is a 1x1
convolution with zero-initialized weights and a frozen all-ones bias, so
at initialization the scale field is exactly one and propagation reduces
to pure bilinear warping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Node, Tape
from .errors import ContractViolation


@dataclass
class Frame:
    """One video frame: index in the sequence plus (3,H,W) pixels in [0,1]."""

    index: int
    image: np.ndarray


def downsample_flow(flow_full: np.ndarray, stride: int) -> np.ndarray:
    """Frame-resolution flow -> feature-resolution flow.

    Picks the displacement nearest each feature pixel's center and
    rescales it into feature-pixel units (divide by stride).
    """
    if flow_full.ndim != 3 or flow_full.shape[0] != 2:
        raise ContractViolation(f"flow must be (2,H,W), got {flow_full.shape}")
    _, H, W = flow_full.shape
    if H % stride or W % stride:
        raise ContractViolation(f"flow dims {(H, W)} not divisible by stride {stride}")
    off = stride // 2
    return flow_full[:, off::stride, off::stride] / stride


def propagate(feature: Node, flow: Node, scale: Node) -> Node:
    """Backward-warp `feature` along `flow`, then refine by `scale`."""
    C, h, w = feature.shape
    if flow.shape != (2, h, w):
        raise ContractViolation(f"flow shape {flow.shape} != (2,{h},{w})")
    if scale.shape != (C, h, w):
        raise ContractViolation(f"scale shape {scale.shape} != feature shape {feature.shape}")
    tape = feature.tape
    coords = ops.add(tape.leaf(ops.identity_grid(h, w)), flow)
    return ops.mul(ops.bilinear_sample(feature, coords), scale)


class ZeroFlowSource:
    """Null motion: zero displacements, unit scale."""

    kind = "zero"

    def __init__(self, feature_channels: int, stride: int = 4):
        self.feature_channels = feature_channels
        self.stride = stride

    def estimate(self, tape: Tape, target: Frame, reference: Frame):
        _check_pair(target, reference)
        h, w = target.image.shape[1] // self.stride, target.image.shape[2] // self.stride
        flow = tape.leaf(np.zeros((2, h, w)))
        scale = tape.leaf(np.ones((self.feature_channels, h, w)))
        return flow, scale


class GroundTruthFlowSource:
    """Exact flow from the synthetic generator's motion model, downsampled
    to feature resolution; unit scale."""

    kind = "ground_truth"

    def __init__(self, dataset, feature_channels: int, stride: int = 4):
        self.dataset = dataset
        self.feature_channels = feature_channels
        self.stride = stride

    def estimate(self, tape: Tape, target: Frame, reference: Frame):
        _check_pair(target, reference)
        flow_full = self.dataset.flow_between(target.index, reference.index)
        flow = tape.leaf(downsample_flow(flow_full, self.stride))
        h, w = flow.shape[1:]
        scale = tape.leaf(np.ones((self.feature_channels, h, w)))
        return flow, scale


class LearnedFlowSource:
    """Small conv stack on the concatenated downsampled frame pair.

    Produces (2 + aux_channels, h, w): two displacement channels plus the
    features feeding the scale head.
    """

    kind = "learned"

    def __init__(self, params: "LearnedFlowParams", stride: int = 4):
        self.params = params
        self.stride = stride

    @property
    def feature_channels(self) -> int:
        return self.params.scale_head.out_channels

    def estimate(self, tape: Tape, target: Frame, reference: Frame):
        _check_pair(target, reference)
        p = self.params
        tgt = ops.avg_pool(tape.leaf(target.image), self.stride)
        ref = ops.avg_pool(tape.leaf(reference.image), self.stride)
        h = ops.concat_channels([tgt, ref])
        for kern in p.trunk[:-1]:
            h = ops.relu(ops.conv2d(h, kern))
        h = ops.conv2d(h, p.trunk[-1])
        flow = ops.slice_channels(h, 0, 2)
        scale = ops.conv2d(ops.slice_channels(h, 2, h.shape[0]), p.scale_head)
        return flow, scale


@dataclass
class LearnedFlowParams:
    trunk: list          # ConvKernels ending in (2 + aux) output channels
    scale_head: ops.ConvKernel


def init_learned_flow(store, feature_channels: int, rng: np.random.Generator,
                      hidden: int = 16, aux_channels: int = 8,
                      prefix: str = "flow") -> LearnedFlowParams:
    trunk = [
        ops.make_kernel(store, f"{prefix}.conv0", 6, hidden, 3, rng),
        ops.make_kernel(store, f"{prefix}.conv1", hidden, hidden, 3, rng),
        ops.make_kernel(store, f"{prefix}.conv2", hidden, hidden, 3, rng),
        ops.make_kernel(store, f"{prefix}.conv3", hidden, 2 + aux_channels, 3, rng,
                        weight_scale=0.1),
    ]
    # zero weights + frozen unit bias make the initial scale field exactly one
    head_w = store.add(f"{prefix}.scale_head.weight",
                       np.zeros((feature_channels, aux_channels, 1, 1)))
    head_b = store.add(f"{prefix}.scale_head.bias",
                       np.ones(feature_channels), frozen=True)
    return LearnedFlowParams(trunk=trunk, scale_head=ops.ConvKernel(head_w, head_b))


def make_flow_source(kind: str, feature_channels: int, stride: int = 4,
                     dataset=None, params: LearnedFlowParams | None = None):
    if kind == "zero":
        return ZeroFlowSource(feature_channels, stride)
    if kind == "ground_truth":
        if dataset is None:
            raise ContractViolation("ground_truth flow source needs a dataset")
        return GroundTruthFlowSource(dataset, feature_channels, stride)
    if kind == "learned":
        if params is None:
            raise ContractViolation("learned flow source needs parameters")
        return LearnedFlowSource(params, stride)
    raise ContractViolation(f"unknown flow source {kind!r}")


def estimate_flow(tape: Tape, target: Frame, reference: Frame, source):
    """(flow, scale) nodes at feature resolution for warping reference->target."""
    return source.estimate(tape, target, reference)


def _check_pair(target: Frame, reference: Frame) -> None:
    if target.image.shape != reference.image.shape:
        raise ContractViolation(
            f"frame dims differ: {target.image.shape} vs {reference.image.shape}"
        )
    if target.image.ndim != 3 or target.image.shape[0] != 3:
        raise ContractViolation(f"frames must be (3,H,W), got {target.image.shape}")
