"""The full trainable model: backbone + temporal encoder + head + flow net.

Parameters for every component live in one ParamStore so training,
checkpointing and gradient bookkeeping see a single flat namespace.  The
learned flow stack is always part of the store (and checkpoints) even
when inference runs on exact or null flow, keeping checkpoint layouts
independent of the flow-source choice.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ParamStore
from .backbone import BackboneConfig, BackboneParams, init_backbone
from .flow import LearnedFlowParams, init_learned_flow
from .gru import GruParams, init_gru
from .parsing import HeadConfig, HeadParams, init_head


@dataclass
class ModelConfig:
    num_part_classes: int
    channels: int = 32
    depth: int = 4
    atrous_rates: tuple = (6, 12, 18)
    flow_hidden: int = 16
    flow_aux_channels: int = 8
    init_seed: int = 0

    def to_dict(self):
        return {
            "num_part_classes": self.num_part_classes,
            "channels": self.channels,
            "depth": self.depth,
            "atrous_rates": list(self.atrous_rates),
            "flow_hidden": self.flow_hidden,
            "flow_aux_channels": self.flow_aux_channels,
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_dict(cls, blob):
        blob = dict(blob)
        blob["atrous_rates"] = tuple(blob.get("atrous_rates", (6, 12, 18)))
        return cls(**blob)


@dataclass
class Model:
    config: ModelConfig
    store: ParamStore
    backbone: BackboneParams
    gru: GruParams
    head: HeadParams
    flow: LearnedFlowParams


def init_model(config: ModelConfig) -> Model:
    rng = np.random.default_rng(config.init_seed)
    store = ParamStore()
    backbone = init_backbone(store, BackboneConfig(config.channels, config.depth), rng)
    gru = init_gru(store, config.channels, rng)
    head_cfg = HeadConfig(num_part_classes=config.num_part_classes,
                          atrous_rates=tuple(config.atrous_rates))
    head = init_head(store, config.channels, head_cfg, rng)
    flow = init_learned_flow(store, config.channels, rng,
                             hidden=config.flow_hidden,
                             aux_channels=config.flow_aux_channels)
    return Model(config=config, store=store, backbone=backbone,
                 gru=gru, head=head, flow=flow)


def save_model(model: Model, directory) -> None:
    directory = Path(directory)
    model.store.save(directory)
    (directory / "model_config.json").write_text(
        json.dumps(model.config.to_dict(), indent=2, sort_keys=True) + "\n"
    )


def load_model(directory) -> Model:
    directory = Path(directory)
    config = ModelConfig.from_dict(
        json.loads((directory / "model_config.json").read_text())
    )
    model = init_model(config)
    model.store.load(directory)
    return model
