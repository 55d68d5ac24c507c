"""Desk-scale coupled detector: backbone, RPN, both branches, heads.

Five small convolutional blocks stand in for the usual pretrained
backbone, with strides 1/2/4/8/16 and the deepest block dilated by two
instead of shrinking further.  The RPN scores nine single-ratio anchors
per cell of the deepest map.  Per RoI, the gated branch squeezes and
max-pools every block then gates and concatenates; the occlusion branch
pools 2k^2 position-sensitive score maps (optionally through learned
deformation offsets), and the two are coupled by 1x1-normalized summation
before the class/box heads.

All layers use variance-preserving Gaussian initialization (the backbone
replaces a pretrained network, which is out of scope, and a from-scratch
run needs the detector layers to carry O(1) signal too).  The one
exception is the deformation-offset branch, which starts near zero so
deformable pooling begins as plain pooling.
"""

from __future__ import annotations

import math

import numpy as np

from ..autodiff import (
    ConvParams,
    Graph,
    Tensor4,
    _accum,
    _result,
    conv2d,
    make_conv_params,
    relu,
    resize_nearest,
)
from ..errors import ConfigError
from ..evaluation import Detection
from ..gating import LayerTap, gated_multilayer_extract_batch, \
    make_gate_params, make_squeeze_params
from ..geometry import (
    AnchorConfig,
    Box,
    decode_deltas,
    generate_anchors,
    nms,
)
from ..heads import CoupleParams, make_couple_params, run_heads
from ..pooling import (
    PSRoIMaps,
    RoI,
    deformable_psroi_pool_batch,
    psroi_pool_batch,
)
from .config import TrainConfig

N_ANCHORS = 9
BLOCK_STRIDES = (1, 2, 4, 8, 16)


def _he_conv(rng, in_c, out_c, k, stride=1, pad=0, dilation=1) -> ConvParams:
    """Variance-preserving init for the backbone stand-in."""
    std = math.sqrt(2.0 / (in_c * k * k))
    return make_conv_params(rng, in_c, out_c, k, k, stride=stride, pad=pad,
                            dilation=dilation, weight_std=std)


def anchor_rows(x: Tensor4, per: int, graph: Graph | None = None) -> Tensor4:
    """(1, A*per, h, w) -> (h*w*A, per, 1, 1), matching anchor order."""
    _, c, h, w = x.dims
    a = c // per
    data = (x.data.reshape(a, per, h, w)
            .transpose(2, 3, 0, 1).reshape(h * w * a, per, 1, 1))

    def back(g: np.ndarray) -> None:
        gx = (g.reshape(h, w, a, per)
              .transpose(2, 3, 0, 1).reshape(1, c, h, w))
        _accum(x, gx)

    return _result(data.copy(), "anchor_rows", graph, [x], back)


def gather_rows(x: Tensor4, idx, graph: Graph | None = None) -> Tensor4:
    """Select batch rows by index; gradient scatters back additively."""
    idx = np.asarray(idx, dtype=np.int64)
    data = x.data[idx]

    def back(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accum(x, gx)

    return _result(data.copy(), "gather_rows", graph, [x], back)


class CoupledNetwork:
    """All parameters plus the forward paths of the coupled detector."""

    def __init__(self, cfg: TrainConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params: dict[str, Tensor4] = {}
        w = cfg.widths
        if len(w) != 5:
            raise ConfigError(f"expected 5 backbone widths, got {len(w)}")

        # backbone: two convs per block, downsampling on entry of blocks 2..5,
        # block 5 dilated with its stride held
        self.blocks = []
        in_c = 3
        for bi, out_c in enumerate(w):
            entry_stride = 1 if bi == 0 else 2
            dil = 2 if bi == 4 else 1
            c1 = _he_conv(rng, in_c, out_c, 3, stride=entry_stride, pad=1)
            c2 = _he_conv(rng, out_c, out_c, 3, pad=dil, dilation=dil)
            self.blocks.append((c1, c2))
            self._reg(f"backbone.b{bi + 1}.c1", c1)
            self._reg(f"backbone.b{bi + 1}.c2", c2)
            in_c = out_c

        deep_c = w[-1]
        self.rpn_conv = make_conv_params(rng, deep_c, deep_c, 3, 3, pad=1,
                                         weight_std=None)
        self.rpn_cls = make_conv_params(rng, deep_c, N_ANCHORS * 2, 1, 1,
                                        weight_std=None)
        self.rpn_reg = make_conv_params(rng, deep_c, N_ANCHORS * 4, 1, 1,
                                        weight_std=None)
        self._reg("rpn.conv", self.rpn_conv)
        self._reg("rpn.cls", self.rpn_cls)
        self._reg("rpn.reg", self.rpn_reg)

        pooled = (cfg.pooled_h, cfg.pooled_w)
        self.taps: list[LayerTap] = []
        tap_blocks = range(5) if cfg.gate_kind != "none" else [4]
        gate_c_total = 0
        for bi in tap_blocks:
            c_in = w[bi]
            ratio = min(cfg.squeeze_ratio, c_in)
            sq = make_squeeze_params(rng, c_in, ratio, weight_std=None)
            c_sq = sq.conv.out_channels
            gate = None
            if cfg.gate_kind != "none":
                gate = make_gate_params(rng, cfg.gate_kind, c_sq, pooled,
                                        weight_std=None)
            tap = LayerTap(f"block{bi + 1}", BLOCK_STRIDES[bi], sq, gate,
                           pooled)
            self.taps.append(tap)
            self._reg(f"tap.b{bi + 1}.squeeze", sq.conv)
            if gate is not None:
                self._reg_gate(f"tap.b{bi + 1}.gate", gate)
            gate_c_total += c_sq

        k = cfg.k
        self.occ_score = make_conv_params(rng, deep_c, 2 * k * k, 1, 1,
                                          weight_std=None)
        self._reg("occ.score", self.occ_score)
        self.occ_offset = None
        if cfg.use_deformable:
            # near-zero start keeps the deformable path at plain pooling
            # until the offsets earn their displacement
            self.occ_offset = make_conv_params(rng, deep_c, 2 * k * k, 1, 1,
                                               weight_std=0.01)
            self._reg("occ.offset", self.occ_offset)

        self.couple: CoupleParams = make_couple_params(
            rng, gate_c_total, 2, cfg.couple_width, pooled, weight_std=None)
        self._reg("couple.normA", self.couple.normA)
        self._reg("couple.normB", self.couple.normB)
        self._reg_dense("couple.head_cls", self.couple.head_cls)
        self._reg_dense("couple.head_reg", self.couple.head_reg)

        self.anchor_cfg = AnchorConfig(ratio=cfg.anchor_ratio,
                                       scales=list(cfg.anchor_scales),
                                       stride=BLOCK_STRIDES[-1])

    # -- parameter registry ------------------------------------------------

    def _reg(self, name: str, conv: ConvParams) -> None:
        self.params[f"{name}.w"] = conv.weights
        self.params[f"{name}.b"] = conv.bias

    def _reg_dense(self, name: str, d) -> None:
        self.params[f"{name}.w"] = d.weight
        self.params[f"{name}.b"] = d.bias

    def _reg_gate(self, name: str, gate) -> None:
        if gate.conv is not None:
            self._reg(f"{name}.conv", gate.conv)
        if gate.dw_kernels is not None:
            self.params[f"{name}.dw.k"] = gate.dw_kernels
            self.params[f"{name}.dw.b"] = gate.dw_bias
        self._reg_dense(f"{name}.fc1", gate.fc1)
        self._reg_dense(f"{name}.fc2", gate.fc2)

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def export_params(self) -> dict:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_params(self, arrays: dict) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ConfigError(
                f"parameter set mismatch: missing {sorted(missing)[:3]}..., "
                f"extra {sorted(extra)[:3]}...")
        for name, t in self.params.items():
            arr = np.asarray(arrays[name], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ConfigError(
                    f"shape mismatch for {name!r}: {arr.shape} vs "
                    f"{t.data.shape}")
            t.data = arr.copy()

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    # -- forward paths ------------------------------------------------------

    def forward_backbone(self, image: Tensor4,
                         graph: Graph | None = None) -> dict:
        maps = {}
        x = image
        for bi, (c1, c2) in enumerate(self.blocks):
            x = relu(conv2d(x, c1, graph), graph)
            x = relu(conv2d(x, c2, graph), graph)
            maps[f"block{bi + 1}"] = x
        return maps

    def rpn_forward(self, deep: Tensor4, graph: Graph | None = None):
        """Per-anchor logits (N, 2, 1, 1) and deltas (N, 4, 1, 1)."""
        h = relu(conv2d(deep, self.rpn_conv, graph), graph)
        cls = anchor_rows(conv2d(h, self.rpn_cls, graph), 2, graph)
        reg = anchor_rows(conv2d(h, self.rpn_reg, graph), 4, graph)
        return cls, reg

    def anchors_for(self, deep: Tensor4) -> list[Box]:
        return generate_anchors(deep.h, deep.w, self.anchor_cfg)

    def make_proposals(self, anchors, cls_rows: np.ndarray,
                       reg_rows: np.ndarray, image_hw: tuple[int, int]):
        """Score, decode, clip and NMS-filter anchors into proposals.

        Operates on detached arrays; proposal boxes carry no gradient.
        """
        cfg = self.cfg
        ih, iw = image_hw
        z = cls_rows.reshape(len(anchors), 2)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        scores = (e[:, 1] / e.sum(axis=1))
        deltas = reg_rows.reshape(len(anchors), 4)

        order = np.lexsort((np.arange(len(anchors)), -scores))
        order = order[:cfg.rpn_pre_nms]
        boxes, kept_scores = [], []
        for i in order:
            b = decode_deltas(anchors[i], deltas[i])
            x1 = min(max(b.x1, 0.0), float(iw))
            y1 = min(max(b.y1, 0.0), float(ih))
            x2 = min(max(b.x2, 0.0), float(iw))
            y2 = min(max(b.y2, 0.0), float(ih))
            if x2 - x1 < 2.0 or y2 - y1 < 2.0:
                continue
            boxes.append(Box(x1, y1, x2, y2))
            kept_scores.append(float(scores[i]))
        if not boxes:
            return [], []
        keep = nms(boxes, kept_scores, cfg.rpn_nms_thresh)
        keep = keep[:cfg.rpn_post_nms]
        return [boxes[i] for i in keep], [kept_scores[i] for i in keep]

    def extract_roi_features(self, maps: dict, boxes,
                             graph: Graph | None = None,
                             collect_gates: dict | None = None):
        """Both branches for a batch of proposal boxes (image pixels)."""
        cfg = self.cfg
        feat_gate = gated_multilayer_extract_batch(
            self.taps, maps, boxes, graph, squeezed={},
            collect_gates=collect_gates)

        deep = maps["block5"]
        k = cfg.k
        score_maps = conv2d(deep, self.occ_score, graph)
        bank = PSRoIMaps(score_maps, k=k, c_cls=2)
        rois = [RoI(b, 1.0 / BLOCK_STRIDES[-1]) for b in boxes]
        if self.occ_offset is not None:
            off_maps = conv2d(deep, self.occ_offset, graph)
            offsets = psroi_pool_batch(PSRoIMaps(off_maps, k=k, c_cls=2),
                                       rois, graph)
            pooled = deformable_psroi_pool_batch(bank, rois, offsets,
                                                 cfg.gamma_off, graph)
        else:
            pooled = psroi_pool_batch(bank, rois, graph)
        feat_occ = resize_nearest(pooled, cfg.pooled_h, cfg.pooled_w, graph)
        return feat_gate, feat_occ

    def forward_heads(self, feat_gate: Tensor4, feat_occ: Tensor4,
                      graph: Graph | None = None):
        from ..heads import couple

        coupled = couple(feat_gate, feat_occ, self.couple, graph)
        return run_heads(coupled, self.couple, graph)

    # -- inference ----------------------------------------------------------

    def inference(self, image: Tensor4, image_id: str) -> list[Detection]:
        """Full detection pass: RPN, NMS, heads, final suppression."""
        cfg = self.cfg
        maps = self.forward_backbone(image)
        deep = maps["block5"]
        cls_rows, reg_rows = self.rpn_forward(deep)
        anchors = self.anchors_for(deep)
        ih, iw = image.h, image.w
        proposals, _ = self.make_proposals(anchors, cls_rows.data,
                                           reg_rows.data, (ih, iw))
        if not proposals:
            return []

        feat_gate, feat_occ = self.extract_roi_features(maps, proposals)
        cls, reg = self.forward_heads(feat_gate, feat_occ)
        z = cls.data.reshape(len(proposals), 2)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs = e[:, 1] / e.sum(axis=1)
        deltas = reg.data.reshape(len(proposals), 4)

        boxes, scores = [], []
        for i, p in enumerate(proposals):
            b = decode_deltas(p, deltas[i])
            x1 = min(max(b.x1, 0.0), float(iw))
            y1 = min(max(b.y1, 0.0), float(ih))
            x2 = min(max(b.x2, 0.0), float(iw))
            y2 = min(max(b.y2, 0.0), float(ih))
            if x2 - x1 < 2.0 or y2 - y1 < 2.0 or probs[i] < cfg.score_min:
                continue
            boxes.append(Box(x1, y1, x2, y2))
            scores.append(float(probs[i]))
        if not boxes:
            return []
        keep = nms(boxes, scores, cfg.final_nms_thresh)
        return [Detection(image_id, boxes[i], scores[i]) for i in keep]


def build_network(cfg: TrainConfig, seed_salt: int = 101) -> CoupledNetwork:
    """Deterministic network construction from the training config."""
    rng = np.random.default_rng([cfg.seed, seed_salt])
    return CoupledNetwork(cfg, rng)
