"""Toy fully convolutional feature extractor.

Two stride-2 stages bring a (3,H,W) frame to quarter resolution, followed
by `depth` same-shape double-conv blocks.  Only the external contract
matters downstream: output stride 4 and a fixed channel width.  The stem
carries a full-width convolution at half resolution so that feature
extraction dominates the flow/warp/GRU costs, mirroring the relative
weights the cost model assumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import Node
from .errors import ContractViolation

OUTPUT_STRIDE = 4


@dataclass
class BackboneConfig:
    channels: int = 32
    depth: int = 4

    def __post_init__(self):
        if self.channels < 8:
            raise ContractViolation(f"backbone channels must be >= 8, got {self.channels}")
        if self.depth < 1:
            raise ContractViolation(f"backbone depth must be >= 1, got {self.depth}")


@dataclass
class BackboneParams:
    config: BackboneConfig
    stem: list = field(default_factory=list)     # stride-2 / full-width stem kernels
    blocks: list = field(default_factory=list)   # same-shape kernels, 2 per block


def init_backbone(store, config: BackboneConfig, rng: np.random.Generator,
                  prefix: str = "backbone") -> BackboneParams:
    c = config.channels
    stem = [
        ops.make_kernel(store, f"{prefix}.stem0", 3, c, 3, rng, stride=2),
        ops.make_kernel(store, f"{prefix}.stem1", c, c, 3, rng),
        ops.make_kernel(store, f"{prefix}.stem2", c, c, 3, rng, stride=2),
    ]
    blocks = []
    for i in range(config.depth):
        blocks.append(ops.make_kernel(store, f"{prefix}.block{i}a", c, c, 3, rng))
        blocks.append(ops.make_kernel(store, f"{prefix}.block{i}b", c, c, 3, rng))
    return BackboneParams(config=config, stem=stem, blocks=blocks)


def extract_features(frame: Node, params: BackboneParams) -> Node:
    """(3,H,W) frame -> (C, H/4, W/4) feature map; H, W must divide by 4."""
    if frame.data.ndim != 3 or frame.shape[0] != 3:
        raise ContractViolation(f"expected (3,H,W) frame, got {frame.shape}")
    _, H, W = frame.shape
    if H % OUTPUT_STRIDE or W % OUTPUT_STRIDE:
        raise ContractViolation(
            f"frame dims {(H, W)} must be multiples of {OUTPUT_STRIDE}; pad first"
        )
    h = frame
    for kern in params.stem:
        h = ops.relu(ops.conv2d(h, kern))
    for kern in params.blocks:
        h = ops.relu(ops.conv2d(h, kern))
    return h


def parameter_count(config: BackboneConfig) -> int:
    """Scales as O(channels^2 * depth); used by the cost model's reporting."""
    c = config.channels
    k = 9
    stem = 3 * c * k + c + (c * c * k + c) * 2
    blocks = (c * c * k + c) * 2 * config.depth
    return stem + blocks


def feature_macs(config: BackboneConfig, h: int, w: int) -> int:
    """Predicted MACs of one extraction on an (3,h,w) frame."""
    c = config.channels
    k = 9
    h2, w2 = h // 2, w // 2
    h4, w4 = h // 4, w // 4
    return (
        c * 3 * k * h2 * w2
        + c * c * k * h2 * w2
        + c * c * k * h4 * w4
        + 2 * config.depth * c * c * k * h4 * w4
    )
