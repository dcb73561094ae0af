"""Differentiable dense-tensor primitives.

All operations take tape Nodes holding (C,H,W)-layout float64 arrays and
record their backward rule on the node's tape.  Conventions shared by
every spatial primitive:

* positions are continuous with pixel centers at integer coordinates;
  channel 0 of a coordinate/flow grid is the horizontal (column)
  position, channel 1 the vertical (row) position;
* sampling outside the image clamps the source position to the border,
  and the coordinate gradient is zero wherever the clamp is active
  (one-sided subgradient);
* convolutions zero-pad with pad = dilation*(k-1)/2 per side, which
  preserves spatial shape at stride 1.

Everything is pure and deterministic; repeated calls on identical inputs
are bitwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Param, Tape
from .costs import add_macs
from .errors import ContractViolation


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ContractViolation(message)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    _require(a.shape == b.shape, f"add: shape mismatch {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g):
        a.accumulate(g)
        b.accumulate(g)

    return a.tape.record(out, (a, b), backward, lambda: a.data + b.data)


def sub(a: Node, b: Node) -> Node:
    _require(a.shape == b.shape, f"sub: shape mismatch {a.shape} vs {b.shape}")
    out = a.data - b.data

    def backward(g):
        a.accumulate(g)
        b.accumulate(-g)

    return a.tape.record(out, (a, b), backward, lambda: a.data - b.data)


def mul(a: Node, b: Node) -> Node:
    _require(a.shape == b.shape, f"mul: shape mismatch {a.shape} vs {b.shape}")
    add_macs(a.data.size)
    out = a.data * b.data

    def backward(g):
        a.accumulate(g * b.data)
        b.accumulate(g * a.data)

    return a.tape.record(out, (a, b), backward, lambda: a.data * b.data)


def scale(a: Node, s: float) -> Node:
    """Multiply by a python scalar constant."""
    out = a.data * s

    def backward(g):
        a.accumulate(g * s)

    return a.tape.record(out, (a,), backward, lambda: a.data * s)


def add_channel_bias(x: Node, bias: Node) -> Node:
    """Add a per-channel bias vector (C,) to a (C,H,W) map."""
    _require(x.data.ndim == 3, f"add_channel_bias: expected (C,H,W), got {x.shape}")
    _require(
        bias.data.shape == (x.shape[0],),
        f"add_channel_bias: bias shape {bias.shape} != ({x.shape[0]},)",
    )
    out = x.data + bias.data[:, None, None]

    def backward(g):
        x.accumulate(g)
        bias.accumulate(g.sum(axis=(1, 2)))

    return x.tape.record(out, (x, bias), backward, lambda: x.data + bias.data[:, None, None])


def sigmoid(x: Node) -> Node:
    out = _sigmoid_np(x.data)

    def backward(g):
        x.accumulate(g * out * (1.0 - out))

    return x.tape.record(out, (x,), backward, lambda: _sigmoid_np(x.data))


def tanh(x: Node) -> Node:
    out = np.tanh(x.data)

    def backward(g):
        x.accumulate(g * (1.0 - out * out))

    return x.tape.record(out, (x,), backward, lambda: np.tanh(x.data))


def relu(x: Node) -> Node:
    out = np.maximum(x.data, 0.0)

    def backward(g):
        x.accumulate(g * (x.data > 0.0))

    return x.tape.record(out, (x,), backward, lambda: np.maximum(x.data, 0.0))


def _sigmoid_np(z):
    # split form avoids exp overflow for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# reshuffling
# ---------------------------------------------------------------------------


def concat_channels(parts) -> Node:
    parts = list(parts)
    _require(len(parts) >= 1, "concat_channels: need at least one input")
    spatial = parts[0].shape[1:]
    for p in parts:
        _require(p.shape[1:] == spatial, "concat_channels: spatial dims differ")
    out = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.shape[0] for p in parts]

    def backward(g):
        start = 0
        for p, c in zip(parts, sizes):
            p.accumulate(g[start : start + c])
            start += c

    return parts[0].tape.record(
        out, tuple(parts), backward, lambda: np.concatenate([p.data for p in parts], axis=0)
    )


def slice_channels(x: Node, start: int, stop: int) -> Node:
    _require(0 <= start < stop <= x.shape[0], f"slice_channels: bad range [{start},{stop})")
    out = x.data[start:stop].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        x.accumulate(full)

    return x.tape.record(out, (x,), backward, lambda: x.data[start:stop].copy())


def reshape(x: Node, shape) -> Node:
    shape = tuple(shape)
    _require(int(np.prod(shape)) == x.data.size,
             f"reshape: cannot view {x.shape} as {shape}")
    out = x.data.reshape(shape)

    def backward(g):
        x.accumulate(g.reshape(x.data.shape))

    return x.tape.record(out, (x,), backward, lambda: x.data.reshape(shape))


def spatial_mean(x: Node) -> Node:
    """Mean over H and W: (C,H,W) -> (C,1,1)."""
    _require(x.data.ndim == 3, f"spatial_mean: expected (C,H,W), got {x.shape}")
    n = x.shape[1] * x.shape[2]
    out = x.data.mean(axis=(1, 2), keepdims=True)

    def backward(g):
        x.accumulate(np.broadcast_to(g / n, x.data.shape))

    return x.tape.record(out, (x,), backward, lambda: x.data.mean(axis=(1, 2), keepdims=True))


def sum_all(x: Node) -> Node:
    out = np.asarray(x.data.sum())

    def backward(g):
        x.accumulate(np.broadcast_to(g, x.data.shape).copy())

    return x.tape.record(out, (x,), backward, lambda: np.asarray(x.data.sum()))


def mean_all(x: Node) -> Node:
    n = x.data.size
    out = np.asarray(x.data.mean())

    def backward(g):
        x.accumulate(np.broadcast_to(g / n, x.data.shape).copy())

    return x.tape.record(out, (x,), backward, lambda: np.asarray(x.data.mean()))


def avg_pool(x: Node, k: int) -> Node:
    """Non-overlapping k x k mean pooling; H and W must divide by k."""
    C, H, W = x.shape
    _require(k >= 1, f"avg_pool: k must be >= 1, got {k}")
    _require(H % k == 0 and W % k == 0, f"avg_pool: dims {(H, W)} not divisible by {k}")
    if k == 1:
        return x

    def fwd():
        return x.data.reshape(C, H // k, k, W // k, k).mean(axis=(2, 4))

    out = fwd()

    def backward(g):
        expanded = np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)
        x.accumulate(expanded)

    return x.tape.record(out, (x,), backward, fwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


@dataclass
class ConvKernel:
    """A 2-D convolution's parameters plus its stride/dilation config.

    weight: (out_channels, in_channels, kh, kw) with kh, kw odd;
    bias: (out_channels,) or None.  Padding is always the shape-preserving
    dilation*(k-1)/2 per side.
    """

    weight: Param
    bias: Param | None = None
    stride: int = 1
    dilation: int = 1

    def __post_init__(self):
        if self.weight.data.ndim != 4:
            raise ContractViolation(f"conv weight must be 4-D, got {self.weight.data.shape}")
        o, c, kh, kw = self.weight.data.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ContractViolation(f"conv kernel dims must be odd, got {(kh, kw)}")
        if self.stride < 1 or self.dilation < 1:
            raise ContractViolation("stride and dilation must be >= 1")
        if self.bias is not None and self.bias.data.shape != (o,):
            raise ContractViolation(
                f"bias shape {self.bias.data.shape} != ({o},)"
            )

    @property
    def out_channels(self):
        return self.weight.data.shape[0]

    @property
    def in_channels(self):
        return self.weight.data.shape[1]

    def macs_for(self, h: int, w: int) -> int:
        """MACs of one application to an (in_channels, h, w) input."""
        o, c, kh, kw = self.weight.data.shape
        ho, wo = conv_output_hw(h, w, kh, kw, self.stride, self.dilation)
        return o * c * kh * kw * ho * wo

    def params(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]


def conv_output_hw(h, w, kh, kw, stride, dilation):
    ph = dilation * (kh - 1) // 2
    pw = dilation * (kw - 1) // 2
    ho = (h + 2 * ph - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * pw - dilation * (kw - 1) - 1) // stride + 1
    return ho, wo


def conv2d(x: Node, kernel: ConvKernel) -> Node:
    """Cross-correlation with zero padding; same-shape output at stride 1."""
    tape = x.tape
    wnode = tape.param(kernel.weight)
    bnode = tape.param(kernel.bias) if kernel.bias is not None else None
    return conv2d_nodes(x, wnode, bnode, stride=kernel.stride, dilation=kernel.dilation)


def conv2d_nodes(x: Node, wnode: Node, bnode: Node | None = None,
                 stride: int = 1, dilation: int = 1) -> Node:
    """Functional convolution over tape nodes (weight/bias as nodes)."""
    _require(x.data.ndim == 3, f"conv2d: expected (C,H,W) input, got {x.shape}")
    _require(wnode.data.ndim == 4, f"conv2d: expected 4-D weight, got {wnode.shape}")
    C, H, W = x.shape
    o, c, kh, kw = wnode.data.shape
    _require(kh % 2 == 1 and kw % 2 == 1, f"conv kernel dims must be odd, got {(kh, kw)}")
    _require(c == C, f"conv2d: kernel expects {c} input channels, got {C}")
    _require(np.all(np.isfinite(x.data)), "conv2d: non-finite input")
    d, s = dilation, stride
    ph, pw = d * (kh - 1) // 2, d * (kw - 1) // 2
    _require(d * (kh - 1) < H + 2 * ph, f"conv2d: dilation {d} too large for height {H}")
    _require(d * (kw - 1) < W + 2 * pw, f"conv2d: dilation {d} too large for width {W}")

    tape = x.tape
    ho, wo = conv_output_hw(H, W, kh, kw, s, d)
    add_macs(o * c * kh * kw * ho * wo)

    def fwd():
        xp = np.zeros((C, H + 2 * ph, W + 2 * pw), dtype=x.data.dtype)
        xp[:, ph : ph + H, pw : pw + W] = x.data
        weight = wnode.data
        out = np.zeros((o, ho, wo), dtype=x.data.dtype)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, i * d : i * d + s * (ho - 1) + 1 : s,
                           j * d : j * d + s * (wo - 1) + 1 : s]
                out += np.tensordot(weight[:, :, i, j], patch, axes=([1], [0]))
        if bnode is not None:
            out += bnode.data[:, None, None]
        return out

    out = fwd()

    def backward(g):
        xp = np.zeros((C, H + 2 * ph, W + 2 * pw), dtype=x.data.dtype)
        xp[:, ph : ph + H, pw : pw + W] = x.data
        weight = wnode.data
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(weight)
        for i in range(kh):
            for j in range(kw):
                rows = slice(i * d, i * d + s * (ho - 1) + 1, s)
                cols = slice(j * d, j * d + s * (wo - 1) + 1, s)
                patch = xp[:, rows, cols]
                dw[:, :, i, j] = np.tensordot(g, patch, axes=([1, 2], [1, 2]))
                dxp[:, rows, cols] += np.tensordot(weight[:, :, i, j], g, axes=([0], [0]))
        x.accumulate(dxp[:, ph : ph + H, pw : pw + W])
        wnode.accumulate(dw)
        if bnode is not None:
            bnode.accumulate(g.sum(axis=(1, 2)))

    parents = (x, wnode) if bnode is None else (x, wnode, bnode)
    return tape.record(out, parents, backward, fwd)


# ---------------------------------------------------------------------------
# bilinear sampling and friends
# ---------------------------------------------------------------------------


def _gather_weights(data, cx, cy):
    """Shared bilinear-gather kernel; returns value plus saved interpolants."""
    C, H, W = data.shape
    cxc = np.clip(cx, 0.0, W - 1.0)
    cyc = np.clip(cy, 0.0, H - 1.0)
    x0 = np.floor(cxc).astype(np.intp)
    y0 = np.floor(cyc).astype(np.intp)
    x0 = np.minimum(x0, W - 1)
    y0 = np.minimum(y0, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = cxc - x0
    fy = cyc - y0
    w00 = (1.0 - fx) * (1.0 - fy)
    w01 = fx * (1.0 - fy)
    w10 = (1.0 - fx) * fy
    w11 = fx * fy
    value = (
        w00 * data[:, y0, x0]
        + w01 * data[:, y0, x1]
        + w10 * data[:, y1, x0]
        + w11 * data[:, y1, x1]
    )
    return value, (x0, x1, y0, y1, fx, fy, cxc, cyc)


def sample_bilinear_np(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Plain-numpy bilinear gather (no tape); used by non-trained paths."""
    value, _ = _gather_weights(np.asarray(data, dtype=np.float64), coords[0], coords[1])
    return value


def grid_sample(x: Node, coords: Node) -> Node:
    """Bilinear sampling of a (C,H,W) map at absolute positions (2,Ho,Wo).

    Out-of-bounds positions clamp to the border.  Differentiable w.r.t.
    both the sampled map and the coordinates; the coordinate gradient is
    zero where the clamp is active.
    """
    _require(x.data.ndim == 3, f"grid_sample: expected (C,H,W) input, got {x.shape}")
    _require(
        coords.data.ndim == 3 and coords.shape[0] == 2,
        f"grid_sample: coords must be (2,Ho,Wo), got {coords.shape}",
    )
    _require(np.all(np.isfinite(coords.data)), "grid_sample: non-finite coordinates")
    C, H, W = x.shape
    out, saved = _gather_weights(x.data, coords.data[0], coords.data[1])
    add_macs(4 * out.size)

    def backward(g):
        x0, x1, y0, y1, fx, fy, cxc, cyc = saved
        data = x.data
        dx = np.zeros_like(data)
        idx = np.arange(C)[:, None, None]
        np.add.at(dx, (idx, y0[None], x0[None]), g * ((1.0 - fx) * (1.0 - fy)))
        np.add.at(dx, (idx, y0[None], x1[None]), g * (fx * (1.0 - fy)))
        np.add.at(dx, (idx, y1[None], x0[None]), g * ((1.0 - fx) * fy))
        np.add.at(dx, (idx, y1[None], x1[None]), g * (fx * fy))
        x.accumulate(dx)

        v00 = data[:, y0, x0]
        v01 = data[:, y0, x1]
        v10 = data[:, y1, x0]
        v11 = data[:, y1, x1]
        dval_dx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
        dval_dy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01)
        # clamped positions contribute no coordinate gradient
        inside_x = (coords.data[0] > 0.0) & (coords.data[0] < W - 1.0)
        inside_y = (coords.data[1] > 0.0) & (coords.data[1] < H - 1.0)
        gc = np.zeros_like(coords.data)
        gc[0] = (g * dval_dx).sum(axis=0) * inside_x
        gc[1] = (g * dval_dy).sum(axis=0) * inside_y
        coords.accumulate(gc)

    return x.tape.record(
        out,
        (x, coords),
        backward,
        lambda: _gather_weights(x.data, coords.data[0], coords.data[1])[0],
    )


def bilinear_sample(x: Node, coords: Node) -> Node:
    """Spec'd warping entry point: coords spatial dims must match the input."""
    _require(
        coords.shape[1:] == x.shape[1:],
        f"bilinear_sample: coords {coords.shape} do not match input {x.shape}",
    )
    return grid_sample(x, coords)


def identity_grid(h: int, w: int) -> np.ndarray:
    """(2,h,w) absolute positions: channel 0 = column, channel 1 = row."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([xs, ys])


def upsample_bilinear(x: Node, factor: int) -> Node:
    """Integer-factor bilinear upsampling, align-corners-false convention."""
    _require(factor >= 1, f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    C, H, W = x.shape
    ho, wo = H * factor, W * factor
    ys = (np.arange(ho, dtype=np.float64)[:, None] + 0.5) / factor - 0.5
    xs = (np.arange(wo, dtype=np.float64)[None, :] + 0.5) / factor - 0.5
    coords = np.empty((2, ho, wo))
    coords[0] = np.broadcast_to(xs, (ho, wo))
    coords[1] = np.broadcast_to(ys, (ho, wo))
    return grid_sample(x, x.tape.leaf(coords))


def roi_align(x: Node, box, out_size) -> Node:
    """Average-of-one-sample ROI pooling on a (C,H,W) map.

    `box` is (x0, y0, x1, y1) in edge-based continuous coordinates of the
    map (pixel i spans [i, i+1)); each output bin takes one bilinear
    sample at its center.
    """
    x0, y0, x1, y1 = (float(v) for v in box)
    _require(x1 > x0 and y1 > y0, f"roi_align: box must have positive area, got {box}")
    oh, ow = out_size
    _require(oh >= 1 and ow >= 1, f"roi_align: bad output size {out_size}")
    bw, bh = x1 - x0, y1 - y0
    cx = x0 + (np.arange(ow, dtype=np.float64)[None, :] + 0.5) * bw / ow - 0.5
    cy = y0 + (np.arange(oh, dtype=np.float64)[:, None] + 0.5) * bh / oh - 0.5
    coords = np.empty((2, oh, ow))
    coords[0] = np.broadcast_to(cx, (oh, ow))
    coords[1] = np.broadcast_to(cy, (oh, ow))
    return grid_sample(x, x.tape.leaf(coords))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _log_softmax(logits, axis):
    m = logits.max(axis=axis, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_ce_spatial(logits: Node, labels: np.ndarray) -> Node:
    """Pixel-mean softmax cross-entropy: logits (K,H,W), labels (H,W) ints."""
    K, H, W = logits.shape
    labels = np.asarray(labels)
    _require(labels.shape == (H, W), f"labels shape {labels.shape} != {(H, W)}")
    _require(labels.min() >= 0 and labels.max() < K, "labels out of class range")

    def fwd():
        logp = _log_softmax(logits.data, axis=0)
        return np.asarray(-logp[labels, np.arange(H)[:, None], np.arange(W)[None, :]].mean())

    out = fwd()

    def backward(g):
        logp = _log_softmax(logits.data, axis=0)
        grad = np.exp(logp)
        grad[labels, np.arange(H)[:, None], np.arange(W)[None, :]] -= 1.0
        logits.accumulate(g * grad / (H * W))

    return logits.tape.record(out, (logits,), backward, fwd)


def softmax_ce_rows(logits: Node, labels: np.ndarray) -> Node:
    """Row-mean softmax cross-entropy: logits (N,K), labels (N,) ints."""
    N, K = logits.shape
    labels = np.asarray(labels)
    _require(labels.shape == (N,), f"labels shape {labels.shape} != ({N},)")
    _require(labels.min() >= 0 and labels.max() < K, "labels out of class range")

    def fwd():
        logp = _log_softmax(logits.data, axis=1)
        return np.asarray(-logp[np.arange(N), labels].mean())

    out = fwd()

    def backward(g):
        logp = _log_softmax(logits.data, axis=1)
        grad = np.exp(logp)
        grad[np.arange(N), labels] -= 1.0
        logits.accumulate(g * grad / N)

    return logits.tape.record(out, (logits,), backward, fwd)


def bce_logits(logits: Node, targets: np.ndarray) -> Node:
    """Element-mean binary cross-entropy on logits (numerically stable)."""
    targets = np.asarray(targets, dtype=np.float64)
    _require(targets.shape == logits.shape, "bce_logits: target shape mismatch")

    def fwd():
        z = logits.data
        return np.asarray(
            (np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))).mean()
        )

    out = fwd()

    def backward(g):
        logits.accumulate(g * (_sigmoid_np(logits.data) - targets) / logits.data.size)

    return logits.tape.record(out, (logits,), backward, fwd)


def smooth_l1(pred: Node, targets: np.ndarray) -> Node:
    """Huber-style loss: per element 0.5 d^2 if |d|<1 else |d|-0.5; summed
    over the last axis, averaged over rows."""
    targets = np.asarray(targets, dtype=np.float64)
    _require(targets.shape == pred.shape, "smooth_l1: target shape mismatch")
    nrows = pred.shape[0] if pred.data.ndim > 1 else 1

    def fwd():
        d = pred.data - targets
        a = np.abs(d)
        elem = np.where(a < 1.0, 0.5 * d * d, a - 0.5)
        return np.asarray(elem.sum() / nrows)

    out = fwd()

    def backward(g):
        d = pred.data - targets
        pred.accumulate(g * np.clip(d, -1.0, 1.0) / nrows)

    return pred.tape.record(out, (pred,), backward, fwd)


# ---------------------------------------------------------------------------
# parameter initialization helpers
# ---------------------------------------------------------------------------


def he_weights(rng: np.random.Generator, out_c: int, in_c: int, k: int) -> np.ndarray:
    """He-style normal init for a (out_c, in_c, k, k) conv weight."""
    std = np.sqrt(2.0 / (in_c * k * k))
    return rng.normal(0.0, std, size=(out_c, in_c, k, k))


def make_kernel(store, name, in_c, out_c, k, rng, stride=1, dilation=1,
                bias=True, weight_scale=1.0) -> ConvKernel:
    """Create a ConvKernel whose params are registered in `store`."""
    w = store.add(f"{name}.weight", he_weights(rng, out_c, in_c, k) * weight_scale)
    b = store.add(f"{name}.bias", np.zeros(out_c)) if bias else None
    return ConvKernel(w, b, stride=stride, dilation=dilation)
