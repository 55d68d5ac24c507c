import pytest

from cdon.errors import ConfigError
from cdon.harness.config import (
    TrainConfig,
    canonical_text,
    config_hash,
    load_config,
    parse_config_text,
)
from cdon.harness.scenes import SceneConfig


class TestParser:
    def test_empty_text_gives_defaults(self):
        scene, train = parse_config_text("")
        assert scene == SceneConfig()
        assert train == TrainConfig()

    def test_overrides_and_comments(self):
        text = """
        # training tweaks
        total_steps = 42      # inline comment
        gate_kind = spatio
        use_deformable = false
        image_h = 96
        ped_height_max = 80
        lr_drops = 10:0.5,20:0.1
        widths = 8,8,8,8,8
        """
        scene, train = parse_config_text(text)
        assert train.total_steps == 42
        assert train.gate_kind == "spatio"
        assert train.use_deformable is False
        assert scene.image_h == 96
        assert scene.ped_height_max == 80
        assert train.lr_drops == ((10, 0.5), (20, 0.1))
        assert train.widths == (8, 8, 8, 8, 8)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_text("no_such_thing = 1")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="bad value"):
            parse_config_text("total_steps = banana")

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="key = value"):
            parse_config_text("just some words")

    def test_shared_seed_reaches_both_configs(self):
        scene, train = parse_config_text("seed = 99")
        assert scene.seed == 99 and train.seed == 99

    def test_load_from_file(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("total_steps = 7\n")
        _, train = load_config(p)
        assert train.total_steps == 7


class TestHash:
    def test_stable_for_equal_configs(self):
        a = config_hash(SceneConfig(), TrainConfig())
        b = config_hash(SceneConfig(), TrainConfig())
        assert a == b and len(a) == 64

    def test_differs_when_any_field_changes(self):
        base = config_hash(SceneConfig(), TrainConfig())
        assert config_hash(SceneConfig(seed=1), TrainConfig()) != base
        assert config_hash(SceneConfig(),
                           TrainConfig(squeeze_ratio=4)) != base

    def test_canonical_text_parses_back(self):
        text = canonical_text(SceneConfig(image_h=96, ped_height_max=80),
                              TrainConfig(total_steps=3))
        scene, train = parse_config_text(text)
        assert scene.image_h == 96
        assert train.total_steps == 3


class TestValidation:
    def test_bad_gate_kind(self):
        with pytest.raises(ConfigError):
            TrainConfig(gate_kind="both")

    def test_anchor_scale_count_enforced(self):
        with pytest.raises(ConfigError):
            TrainConfig(anchor_scales=(32, 64))
