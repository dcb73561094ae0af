"""Convolutional GRU temporal encoding over key frames.

One recurrent step combines the previous hidden state with an input
feature map through three gates, every transformation a same-shape
convolution:

    z = sigmoid(x * w_xz + h * w_hz + b_z)        update gate
    r = sigmoid(x * w_xr + h * w_hr + b_r)        reset gate
    c = tanh(x * w_xc + (r . h) * w_hc + b_c)     candidate memory
    h_new = (1 - z) . h + z . c

Key-frame encoding warps each former key's features to the current key,
feeds them through the cell in temporal order (most distant first), then
feeds the current key's raw features; the final state is the encoded
feature.  The initial hidden state is zero, so an empty history degrades
to a single cell step on the current feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Node, Param
from .costs import scope
from .errors import ContractViolation
from .flow import propagate


@dataclass
class GruParams:
    """Six 3x3 convolution kernels plus three per-channel bias vectors."""

    w_xz: ops.ConvKernel
    w_hz: ops.ConvKernel
    w_xr: ops.ConvKernel
    w_hr: ops.ConvKernel
    w_xc: ops.ConvKernel
    w_hc: ops.ConvKernel
    b_z: Param
    b_r: Param
    b_c: Param

    @property
    def channels(self) -> int:
        return self.w_xz.out_channels

    def kernels(self):
        return [self.w_xz, self.w_hz, self.w_xr, self.w_hr, self.w_xc, self.w_hc]


def init_gru(store, channels: int, rng: np.random.Generator,
             kernel_size: int = 3, prefix: str = "gru") -> GruParams:
    """Fresh GRU parameters registered under `prefix` in the store.

    The update-gate bias starts at -1 so a fresh cell updates slowly and
    mixes information across the sequence by default (the forget-bias
    trick); training is free to move it.
    """
    def kern(name):
        return ops.make_kernel(store, f"{prefix}.{name}", channels, channels,
                               kernel_size, rng, bias=False)

    return GruParams(
        w_xz=kern("w_xz"), w_hz=kern("w_hz"),
        w_xr=kern("w_xr"), w_hr=kern("w_hr"),
        w_xc=kern("w_xc"), w_hc=kern("w_hc"),
        b_z=store.add(f"{prefix}.b_z", np.full(channels, -1.0)),
        b_r=store.add(f"{prefix}.b_r", np.zeros(channels)),
        b_c=store.add(f"{prefix}.b_c", np.zeros(channels)),
    )


def gru_step(x: Node, h_prev: Node, params: GruParams) -> Node:
    """One convGRU update; output shape equals input shape."""
    if x.shape != h_prev.shape:
        raise ContractViolation(
            f"gru_step: input {x.shape} and state {h_prev.shape} dims differ"
        )
    tape = x.tape
    bz, br, bc = tape.param(params.b_z), tape.param(params.b_r), tape.param(params.b_c)

    z = ops.sigmoid(ops.add_channel_bias(
        ops.add(ops.conv2d(x, params.w_xz), ops.conv2d(h_prev, params.w_hz)), bz))
    r = ops.sigmoid(ops.add_channel_bias(
        ops.add(ops.conv2d(x, params.w_xr), ops.conv2d(h_prev, params.w_hr)), br))
    cand = ops.tanh(ops.add_channel_bias(
        ops.add(ops.conv2d(x, params.w_xc), ops.conv2d(ops.mul(r, h_prev), params.w_hc)), bc))

    ones = tape.leaf(np.ones_like(z.data))
    # literal weighted-combination form so gate saturation is exact
    return ops.add(ops.mul(ops.sub(ones, z), h_prev), ops.mul(z, cand))


def encode_key(current: Node, former_keys, params: GruParams,
               temporal_mode: str = "gru") -> Node:
    """Fold warped former-key features and the current feature into one map.

    `former_keys` is an ordered sequence of (feature, flow, scale) node
    triples, most distant key first; each is warped to the current key
    before entering the recurrence.  `temporal_mode="average"` replaces
    the GRU with a plain mean over the warped features and the current
    one (the encoder-free baseline).
    """
    if temporal_mode not in ("gru", "average"):
        raise ContractViolation(f"unknown temporal mode {temporal_mode!r}")
    former_keys = list(former_keys)
    for feat, flow, scl in former_keys:
        if feat.shape != current.shape:
            raise ContractViolation(
                f"encode_key: former key {feat.shape} does not match current {current.shape}"
            )

    with scope("warp"):
        warped = [propagate(feat, flow, scl) for feat, flow, scl in former_keys]

    with scope("gru"):
        if temporal_mode == "average":
            acc = current
            for w in warped:
                acc = ops.add(acc, w)
            return ops.scale(acc, 1.0 / (len(warped) + 1))

        tape = current.tape
        h = tape.leaf(np.zeros_like(current.data))
        for w in warped:
            h = gru_step(w, h, params)
        return gru_step(current, h, params)
