import numpy as np
import pytest

from cdon.autodiff import Graph, Tensor4, backward, sum_all
from cdon.errors import ConfigError
from cdon.geometry import Box
from cdon.harness.config import TrainConfig
from cdon.harness.network import (
    anchor_rows,
    build_network,
    gather_rows,
)
from cdon.pooling import PSRoIMaps, RoI, psroi_pool_batch


def tiny_cfg(**kw):
    base = dict(widths=(4, 4, 4, 4, 4), gate_kind="none", squeeze_ratio=1,
                k=1, couple_width=3, pooled_h=2, pooled_w=2,
                anchor_scales=(8, 12, 16, 24, 32, 48, 64, 96, 128),
                rpn_pre_nms=50, rpn_post_nms=20, total_steps=1)
    base.update(kw)
    return TrainConfig(**base)


class TestAnchorRows:
    def test_layout_matches_anchor_order(self):
        # channel (a, p) at cell (i, j) must land at row (i*w + j)*A + a
        h, w, a, per = 2, 3, 4, 2
        data = np.zeros((1, a * per, h, w))
        for ai in range(a):
            for p in range(per):
                for i in range(h):
                    for j in range(w):
                        data[0, ai * per + p, i, j] = (
                            1000 * ai + 100 * p + 10 * i + j)
        rows = anchor_rows(Tensor4(data), per).data
        assert rows.shape == (h * w * a, per, 1, 1)
        for i in range(h):
            for j in range(w):
                for ai in range(a):
                    row = (i * w + j) * a + ai
                    for p in range(per):
                        assert rows[row, p, 0, 0] == \
                            1000 * ai + 100 * p + 10 * i + j

    def test_gradient_roundtrip(self):
        rng = np.random.default_rng(0)
        x = Tensor4(rng.normal(size=(1, 18, 3, 3)), requires_grad=True)
        g = Graph()
        backward(g, sum_all(anchor_rows(x, 2, g), g))
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_gather_rows_values_and_grad(self):
        rng = np.random.default_rng(1)
        x = Tensor4(rng.normal(size=(6, 2, 1, 1)), requires_grad=True)
        g = Graph()
        sel = gather_rows(x, [4, 1, 1], g)
        np.testing.assert_array_equal(sel.data[0], x.data[4])
        backward(g, sum_all(sel, g))
        # row 1 picked twice accumulates twice
        assert x.grad[1, 0, 0, 0] == 2.0
        assert x.grad[4, 0, 0, 0] == 1.0
        assert x.grad[0, 0, 0, 0] == 0.0


class TestBuildNetwork:
    def test_parameter_count_matches_hand_tally(self):
        # widths (4,4,4,4,4), gate none, r=1, k=1, couple width 3, 2x2 grid:
        # backbone 1444 + rpn 418 + squeeze 20 + occ 2*10 + couple 102
        net = build_network(tiny_cfg())
        assert net.parameter_count() == 2004

    def test_deformable_flag_changes_wiring(self):
        on = build_network(tiny_cfg())
        off = build_network(tiny_cfg(use_deformable=False))
        assert on.occ_offset is not None
        assert off.occ_offset is None
        assert on.parameter_count() - off.parameter_count() == 10

    def test_squeeze_ratio_halves_tap_channels(self):
        r1 = build_network(TrainConfig(squeeze_ratio=1))
        r2 = build_network(TrainConfig(squeeze_ratio=2))
        c1 = [t.squeeze.conv.out_channels for t in r1.taps]
        c2 = [t.squeeze.conv.out_channels for t in r2.taps]
        assert c1 == [16, 32, 64, 96, 96]
        assert c2 == [8, 16, 32, 48, 48]

    def test_oversized_ratio_clamps_per_tap(self):
        net = build_network(TrainConfig(squeeze_ratio=32))
        outs = [t.squeeze.conv.out_channels for t in net.taps]
        assert outs == [1, 1, 2, 3, 3]

    def test_gate_none_keeps_single_deep_tap(self):
        net = build_network(tiny_cfg())
        assert [t.layer_name for t in net.taps] == ["block5"]
        assert net.taps[0].gate is None

    def test_deterministic_construction(self):
        a = build_network(TrainConfig())
        b = build_network(TrainConfig())
        assert set(a.params) == set(b.params)
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)

    def test_bad_widths_rejected(self):
        with pytest.raises(ConfigError):
            build_network(tiny_cfg(widths=(4, 4)))


class TestForwardPaths:
    def test_backbone_strides(self):
        net = build_network(tiny_cfg())
        img = Tensor4(np.random.default_rng(2).normal(size=(1, 3, 64, 64)))
        maps = net.forward_backbone(img)
        assert maps["block1"].dims[2:] == (64, 64)
        assert maps["block2"].dims[2:] == (32, 32)
        assert maps["block5"].dims[2:] == (4, 4)

    def test_block5_holds_stride_with_dilation(self):
        net = build_network(tiny_cfg())
        c2 = net.blocks[4][1]
        assert c2.dilation == 2 and c2.pad == 2 and c2.stride == 1

    def test_zeroed_offset_branch_reduces_to_plain_pooling(self):
        # wiring-level reduction: deformable path with a silent offset
        # branch equals plain PSRoI pooling of the same score maps
        cfg = tiny_cfg(k=3, use_deformable=True)
        net = build_network(cfg)
        net.occ_offset.weights.data[:] = 0.0
        net.occ_offset.bias.data[:] = 0.0
        img = Tensor4(np.random.default_rng(3).normal(size=(1, 3, 64, 64)))
        maps = net.forward_backbone(img)
        boxes = [Box(4, 4, 40, 60), Box(10, 8, 30, 50)]
        _, feat_occ = net.extract_roi_features(maps, boxes)

        from cdon.autodiff import conv2d, resize_nearest

        score = conv2d(maps["block5"], net.occ_score)
        rois = [RoI(b, 1 / 16) for b in boxes]
        plain = psroi_pool_batch(PSRoIMaps(score, k=3, c_cls=2), rois)
        want = resize_nearest(plain, 2, 2).data
        np.testing.assert_array_equal(feat_occ.data, want)

    def test_proposals_inside_image(self):
        cfg = tiny_cfg()
        net = build_network(cfg)
        img = Tensor4(np.random.default_rng(4).normal(size=(1, 3, 64, 64)))
        maps = net.forward_backbone(img)
        cls_rows, reg_rows = net.rpn_forward(maps["block5"])
        anchors = net.anchors_for(maps["block5"])
        boxes, scores = net.make_proposals(anchors, cls_rows.data,
                                           reg_rows.data, (64, 64))
        assert 0 < len(boxes) <= cfg.rpn_post_nms
        for b in boxes:
            assert 0 <= b.x1 < b.x2 <= 64
            assert 0 <= b.y1 < b.y2 <= 64
        assert sorted(scores, reverse=True) == scores

    def test_inference_returns_detections(self):
        net = build_network(tiny_cfg(score_min=0.0))
        img = Tensor4(np.random.default_rng(5).normal(size=(1, 3, 64, 64)))
        dets = net.inference(img, "imgX")
        assert all(d.image_id == "imgX" for d in dets)
        for d in dets:
            assert 0 <= d.box.x1 < d.box.x2 <= 64

    def test_load_params_roundtrip(self):
        net = build_network(tiny_cfg())
        dump = net.export_params()
        other = build_network(tiny_cfg(seed=9))
        other.load_params(dump)
        for name in dump:
            assert np.array_equal(other.params[name].data, dump[name])

    def test_load_params_shape_mismatch_rejected(self):
        net = build_network(tiny_cfg())
        dump = net.export_params()
        dump["rpn.cls.w"] = np.zeros((1, 1, 1, 1))
        with pytest.raises(ConfigError):
            net.load_params(dump)

    def test_load_params_missing_key_rejected(self):
        net = build_network(tiny_cfg())
        dump = net.export_params()
        del dump["rpn.cls.w"]
        with pytest.raises(ConfigError):
            net.load_params(dump)
