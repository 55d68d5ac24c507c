"""Gated multi-layer feature extraction: squeeze, gate, modulate, concat.

Each backbone block contributes a tap: its feature map is squeezed by a
1x1 convolution (reduction ratio r), RoI-pooled to a fixed grid, passed
through a gate unit, and the gate modulates the pooled features before all
taps are concatenated on channels.

Two gate units exist.  The spatio-wise gate compresses the pooled grid to
a single-channel map (1x1 conv), runs it through two fully connected
layers, and emits an (h_g, w_g) sigmoid mask.  The channel-wise gate
compresses each channel to a scalar with a full-extent depth-wise
convolution and emits a per-channel sigmoid vector.  Both follow
conv -> ReLU -> fc -> ReLU -> fc -> sigmoid.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ConvParams,
    DenseParams,
    Graph,
    Tensor4,
    broadcast_mul,
    concat_channels,
    conv2d,
    dense,
    depthwise_conv2d,
    flatten_to_vector,
    make_conv_params,
    make_dense_params,
    relu,
    reshape,
    sigmoid,
)
from .errors import ConfigError, DimensionError
from .pooling import RoI, roi_max_pool_batch

GATE_KINDS = ("spatio", "channel")
DEFAULT_POOLED_SIZE = (7, 7)


@dataclass
class SqueezeParams:
    """1x1 channel-reduction convolution with its reduction ratio."""

    conv: ConvParams
    ratio: float

    def __post_init__(self):
        _, _, kh, kw = self.conv.weights.dims
        if (kh, kw) != (1, 1):
            raise ConfigError("squeeze convolution must be 1x1")
        if self.ratio < 1:
            raise ConfigError(f"squeeze ratio must be >= 1, got {self.ratio}")

    def tensors(self) -> list[Tensor4]:
        return self.conv.tensors()


@dataclass
class GateParams:
    """One gate unit: compressing conv stage, two fc layers, sigmoid.

    kind "spatio" uses `conv` (1x1, C -> 1); kind "channel" uses the
    full-extent depth-wise pair `dw_kernels` (C, 1, h_g, w_g) / `dw_bias`.
    """

    kind: str
    fc1: DenseParams
    fc2: DenseParams
    hidden_dim: int
    conv: ConvParams | None = None
    dw_kernels: Tensor4 | None = None
    dw_bias: Tensor4 | None = None

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise ConfigError(f"unknown gate kind {self.kind!r}")
        if self.kind == "spatio":
            if self.conv is None or self.conv.out_channels != 1:
                raise ConfigError("spatio gate needs a 1x1 conv to 1 channel")
        else:
            if self.dw_kernels is None or self.dw_bias is None:
                raise ConfigError("channel gate needs depth-wise kernels")

    def tensors(self) -> list[Tensor4]:
        ts = []
        if self.conv is not None:
            ts += self.conv.tensors()
        if self.dw_kernels is not None:
            ts += [self.dw_kernels, self.dw_bias]
        return ts + self.fc1.tensors() + self.fc2.tensors()


@dataclass
class LayerTap:
    """One backbone attachment point for the gated branch."""

    layer_name: str
    stride: int
    squeeze: SqueezeParams
    gate: GateParams | None  # None wires the tap straight through
    pooled_size: tuple[int, int] = DEFAULT_POOLED_SIZE

    def tensors(self) -> list[Tensor4]:
        ts = self.squeeze.tensors()
        if self.gate is not None:
            ts += self.gate.tensors()
        return ts


def gate_hidden_dim(input_dim: int) -> int:
    """Bottleneck width for the gate fc pair: input/4, at least 4."""
    return max(4, input_dim // 4)


def make_squeeze_params(rng: np.random.Generator, c_in: int, ratio: float,
                        weight_std: float | None = 0.01) -> SqueezeParams:
    """Build a squeeze stage; c_in must divide evenly by the ratio."""
    c_out = c_in / ratio
    if c_out != int(c_out) or c_out < 1:
        raise ConfigError(
            f"squeeze ratio {ratio} does not divide {c_in} channels")
    conv = make_conv_params(rng, c_in, int(c_out), 1, 1, weight_std=weight_std)
    return SqueezeParams(conv, float(ratio))


def make_gate_params(rng: np.random.Generator, kind: str, channels: int,
                     pooled_size: tuple[int, int] = DEFAULT_POOLED_SIZE,
                     hidden_dim: int | None = None,
                     weight_std: float | None = 0.01) -> GateParams:
    """weight_std None selects variance-preserving sqrt(2 / fan_in)."""
    h_g, w_g = pooled_size
    if kind == "spatio":
        vec = h_g * w_g
        hidden = hidden_dim if hidden_dim is not None else gate_hidden_dim(vec)
        return GateParams(
            kind="spatio",
            conv=make_conv_params(rng, channels, 1, 1, 1, weight_std=weight_std),
            fc1=make_dense_params(rng, vec, hidden, weight_std=weight_std),
            fc2=make_dense_params(rng, hidden, vec, weight_std=weight_std),
            hidden_dim=hidden)
    if kind == "channel":
        hidden = (hidden_dim if hidden_dim is not None
                  else gate_hidden_dim(channels))
        dw_std = (weight_std if weight_std is not None
                  else np.sqrt(2.0 / (h_g * w_g)))
        kernels = Tensor4(rng.normal(0.0, dw_std, (channels, 1, h_g, w_g)),
                          requires_grad=True)
        bias = Tensor4(np.zeros((1, channels, 1, 1)), requires_grad=True)
        return GateParams(
            kind="channel",
            dw_kernels=kernels,
            dw_bias=bias,
            fc1=make_dense_params(rng, channels, hidden, weight_std=weight_std),
            fc2=make_dense_params(rng, hidden, channels, weight_std=weight_std),
            hidden_dim=hidden)
    raise ConfigError(f"unknown gate kind {kind!r}")


def squeeze(features: Tensor4, p: SqueezeParams,
            graph: Graph | None = None) -> Tensor4:
    """Reduce channel count by the squeeze ratio; spatial dims unchanged."""
    if features.c != p.conv.in_channels:
        raise ConfigError(
            f"squeeze expects {p.conv.in_channels} channels, got {features.c}")
    return conv2d(features, p.conv, graph)


def gate_forward(pooled: Tensor4, p: GateParams,
                 graph: Graph | None = None) -> Tensor4:
    """Compute the gate output G for pooled RoI features.

    Spatio gates return (n, 1, h, w); channel gates (n, c, 1, 1).  Entries
    are strictly inside (0, 1).
    """
    n, c, h, w = pooled.dims
    if p.kind == "spatio":
        y = relu(conv2d(pooled, p.conv, graph), graph)       # (n, 1, h, w)
        y = flatten_to_vector(y, graph)                      # (n, h*w, 1, 1)
        y = relu(dense(y, p.fc1, graph), graph)
        y = sigmoid(dense(y, p.fc2, graph), graph)
        return reshape(y, (n, 1, h, w), graph)
    # channel: full-extent depth-wise conv collapses space to 1x1
    if p.dw_kernels.dims != (c, 1, h, w):
        raise DimensionError(
            f"channel gate kernels {p.dw_kernels.dims} do not match "
            f"pooled dims {pooled.dims}")
    y = relu(depthwise_conv2d(pooled, p.dw_kernels, p.dw_bias, graph), graph)
    y = relu(dense(y, p.fc1, graph), graph)
    return sigmoid(dense(y, p.fc2, graph), graph)            # (n, c, 1, 1)


def modulate(pooled: Tensor4, gate: Tensor4,
             graph: Graph | None = None) -> Tensor4:
    """Apply the gate as an element-wise product; output matches pooled."""
    return broadcast_mul(pooled, gate, graph)


def gated_multilayer_extract(taps, backbone_maps: dict, roi: RoI,
                             graph: Graph | None = None) -> Tensor4:
    """Squeeze, pool, gate and concatenate one RoI across all taps."""
    return gated_multilayer_extract_batch(taps, backbone_maps, [roi.box],
                                          graph)


def gated_multilayer_extract_batch(taps, backbone_maps: dict, boxes,
                                   graph: Graph | None = None,
                                   squeezed: dict | None = None,
                                   collect_gates: dict | None = None) -> Tensor4:
    """Batched tap extraction for many RoIs (boxes in image pixels).

    `squeezed` may carry per-tap pre-squeezed maps so the 1x1 reductions run
    once per image instead of once per call.  `collect_gates`, when given,
    receives tap_name -> gate output for mask dumps.
    """
    sizes = {t.pooled_size for t in taps}
    if len(sizes) != 1:
        raise ConfigError(f"taps disagree on pooled size: {sorted(sizes)}")
    (h_g, w_g) = sizes.pop()

    parts = []
    for tap in taps:
        if tap.layer_name not in backbone_maps:
            raise ConfigError(f"backbone map {tap.layer_name!r} missing")
        if squeezed is not None and tap.layer_name in squeezed:
            sq = squeezed[tap.layer_name]
        else:
            sq = squeeze(backbone_maps[tap.layer_name], tap.squeeze, graph)
            if squeezed is not None:
                squeezed[tap.layer_name] = sq
        rois = [RoI(b, 1.0 / tap.stride) for b in boxes]
        pooled = roi_max_pool_batch(sq, rois, h_g, w_g, graph)
        if tap.gate is not None:
            g = gate_forward(pooled, tap.gate, graph)
            if collect_gates is not None:
                collect_gates[tap.layer_name] = g
            pooled = modulate(pooled, g, graph)
        parts.append(pooled)
    return concat_channels(parts, graph)


def write_gate_mask_csv(path, tap_gates: dict) -> None:
    """Dump gate activations, one row per (roi, tap, flat index)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["roi", "tap", "index", "gate_value"])
        for tap_name, g in tap_gates.items():
            arr = g.data if isinstance(g, Tensor4) else np.asarray(g)
            for r in range(arr.shape[0]):
                flat = arr[r].reshape(-1)
                for i, v in enumerate(flat):
                    writer.writerow([r, tap_name, i, repr(float(v))])
