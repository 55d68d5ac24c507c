import numpy as np
import pytest

from cdon.errors import UsageError
from cdon.evaluation import EvalCurve
from cdon.harness.ablation import benchmark_datasets
from cdon.harness.checkpoint import load_checkpoint, save_checkpoint
from cdon.harness.config import TrainConfig
from cdon.harness.scenes import SceneConfig
from cdon.harness.training import evaluate, train, write_training_log


def small_scene_cfg(**kw):
    base = dict(image_h=64, image_w=64, ped_count_min=1, ped_count_max=2,
                ped_height_min=24, ped_height_max=48, seed=3)
    base.update(kw)
    return SceneConfig(**base)


def small_train_cfg(**kw):
    base = dict(widths=(4, 4, 4, 4, 4), gate_kind="channel", squeeze_ratio=2,
                k=3, couple_width=4, minibatch=48, total_steps=6,
                warmup_steps=2, lr_drops=(),
                anchor_scales=(12, 17, 24, 34, 48, 68, 96, 136, 192),
                rpn_pre_nms=120, rpn_post_nms=40, seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    scfg = small_scene_cfg()
    return scfg, benchmark_datasets(scfg, train_count=4, val_count=3)


class TestTrain:
    def test_zero_steps_returns_initialization(self, tiny_data):
        scfg, (train_set, _) = tiny_data
        cfg = small_train_cfg(total_steps=0)
        ckpt, rows, _ = train(cfg, train_set, scene_cfg=scfg)
        assert rows == []
        from cdon.harness.network import build_network

        fresh = build_network(cfg)
        for name, arr in fresh.export_params().items():
            assert np.array_equal(ckpt.params[name], arr)

    def test_deterministic_checkpoints(self, tiny_data, tmp_path):
        scfg, (train_set, _) = tiny_data
        cfg = small_train_cfg()
        ck_a, rows_a, _ = train(cfg, train_set, scene_cfg=scfg)
        ck_b, rows_b, _ = train(cfg, train_set, scene_cfg=scfg)
        save_checkpoint(ck_a, tmp_path / "a.ckpt")
        save_checkpoint(ck_b, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == \
            (tmp_path / "b.ckpt").read_bytes()
        assert rows_a == rows_b

    def test_log_format(self, tiny_data, tmp_path):
        scfg, (train_set, _) = tiny_data
        cfg = small_train_cfg(total_steps=3)
        _, rows, _ = train(cfg, train_set, scene_cfg=scfg)
        path = tmp_path / "log.csv"
        write_training_log(path, rows)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,lr,cls_loss,reg_loss,total"
        assert len(lines) == 4
        step, lr, cls, reg, total = lines[1].split(",")
        assert float(total) == pytest.approx(
            float(cls) + float(reg), abs=1e-12)

    def test_warmup_lr_applied(self, tiny_data):
        scfg, (train_set, _) = tiny_data
        cfg = small_train_cfg(total_steps=3, warmup_steps=2)
        _, rows, _ = train(cfg, train_set, scene_cfg=scfg)
        assert rows[0]["lr"] == cfg.lr_warmup
        assert rows[2]["lr"] == cfg.lr_base

    def test_ohem_variant_runs(self, tiny_data):
        scfg, (train_set, _) = tiny_data
        cfg = small_train_cfg(total_steps=2, use_ohem=True, ohem_n=8)
        _, rows, _ = train(cfg, train_set, scene_cfg=scfg)
        assert len(rows) == 2

    def test_empty_dataset_rejected(self):
        with pytest.raises(UsageError):
            train(small_train_cfg(), [])

    def test_checkpoint_roundtrip_through_disk(self, tiny_data, tmp_path):
        scfg, (train_set, _) = tiny_data
        cfg = small_train_cfg(total_steps=2)
        ckpt, _, _ = train(cfg, train_set, scene_cfg=scfg)
        save_checkpoint(ckpt, tmp_path / "t.ckpt")
        back = load_checkpoint(tmp_path / "t.ckpt")
        assert back.step == 2
        for name, arr in ckpt.params.items():
            assert np.array_equal(back.params[name], arr)


class TestEvaluate:
    def test_basic_report(self, tiny_data):
        scfg, (train_set, val_set) = tiny_data
        cfg = small_train_cfg(total_steps=2)
        ckpt, _, _ = train(cfg, train_set, scene_cfg=scfg)
        rep = evaluate(ckpt, val_set, ["all"], cfg, scene_cfg=scfg)
        assert isinstance(rep["all"], (EvalCurve, str))

    def test_hash_mismatch_refused(self, tiny_data):
        scfg, (train_set, val_set) = tiny_data
        cfg = small_train_cfg(total_steps=1)
        ckpt, _, _ = train(cfg, train_set, scene_cfg=scfg)
        with pytest.raises(UsageError, match="hash"):
            evaluate(ckpt, val_set, ["all"], cfg,
                     scene_cfg=small_scene_cfg(seed=99))

    def test_unoccluded_data_reports_no_ground_truths(self):
        scfg = small_scene_cfg(occluder_prob=0.0)
        train_set, val_set = benchmark_datasets(scfg, train_count=2,
                                                val_count=2)
        cfg = small_train_cfg(total_steps=1)
        ckpt, _, _ = train(cfg, train_set, scene_cfg=scfg)
        rep = evaluate(ckpt, val_set, ["occlusion"], cfg, scene_cfg=scfg)
        assert rep["occlusion"] == "no evaluated ground truths"

    def test_identical_runs_give_identical_mr(self, tiny_data):
        scfg, (train_set, val_set) = tiny_data
        cfg = small_train_cfg(total_steps=4)
        mk = lambda: evaluate(train(cfg, train_set, scene_cfg=scfg)[0],
                              val_set, ["all"], cfg, scene_cfg=scfg)
        a, b = mk(), mk()
        va = a["all"].mr2 if isinstance(a["all"], EvalCurve) else a["all"]
        vb = b["all"].mr2 if isinstance(b["all"], EvalCurve) else b["all"]
        assert va == vb
