import numpy as np
import pytest

from cdon.errors import ConfigError
from cdon.harness.scenes import (
    SceneConfig,
    gen_scene,
    load_dataset,
    write_dataset,
)


def raster_visibility_oracle(ann, occluders, shape):
    """Count uncovered pixels of the instance box on an integer raster."""
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    x1, y1 = int(ann.full.x1), int(ann.full.y1)
    x2, y2 = int(ann.full.x2), int(ann.full.y2)
    mask[y1:y2, x1:x2] = True
    total = mask.sum()
    for oc in occluders:
        mask[int(oc.y1):int(oc.y2), int(oc.x1):int(oc.x2)] = False
    return mask.sum() / total


class TestGenScene:
    def test_no_occluders_means_full_visibility(self):
        cfg = SceneConfig(occluder_prob=0.0)
        for i in range(5):
            _, anns, _ = gen_scene(cfg, i)
            assert all(a.visibility == 1.0 for a in anns)

    def test_deterministic_per_seed_and_index(self):
        cfg = SceneConfig()
        img_a, anns_a, id_a = gen_scene(cfg, 3)
        img_b, anns_b, id_b = gen_scene(cfg, 3)
        assert id_a == id_b
        assert np.array_equal(img_a.data, img_b.data)
        assert [(a.full, a.visible) for a in anns_a] == \
            [(b.full, b.visible) for b in anns_b]

    def test_different_indices_differ(self):
        cfg = SceneConfig()
        img_a, _, _ = gen_scene(cfg, 0)
        img_b, _, _ = gen_scene(cfg, 1)
        assert not np.array_equal(img_a.data, img_b.data)

    def test_visibility_matches_raster_oracle(self):
        cfg = SceneConfig(occluder_prob=1.0)
        checked = 0
        for i in range(8):
            _, anns, _, occluders = gen_scene(cfg, i, with_occluders=True)
            for a in anns:
                got = raster_visibility_oracle(
                    a, occluders, (cfg.image_h, cfg.image_w))
                assert abs(a.visibility - got) < 1e-6
                checked += 1
        assert checked >= 8

    def test_half_coverage_gives_half_visibility(self):
        cfg = SceneConfig(occluder_prob=1.0, coverage_min=0.5,
                          coverage_max=0.5)
        _, anns, _, occluders = gen_scene(cfg, 0, with_occluders=True)
        for a in anns:
            # rounding to whole pixels: exactly round(q*extent)/extent
            got = raster_visibility_oracle(
                a, occluders, (cfg.image_h, cfg.image_w))
            assert abs(a.visibility - got) < 1e-6

    def test_occluded_visibility_within_configured_band(self):
        cfg = SceneConfig(occluder_prob=1.0)
        for i in range(6):
            _, anns, _ = gen_scene(cfg, i)
            for a in anns:
                # integer rounding can nudge past the band by one pixel
                lo = 1 - cfg.coverage_max - 0.05
                hi = 1 - cfg.coverage_min + 0.05
                assert lo <= a.visibility <= hi

    def test_aspect_ratio_near_configured_mean(self):
        cfg = SceneConfig(occluder_prob=0.0, aspect_jitter=0.02)
        ratios = []
        for i in range(10):
            _, anns, _ = gen_scene(cfg, i)
            ratios += [a.full.width / a.full.height for a in anns]
        assert abs(np.mean(ratios) - 0.41) < 0.06

    def test_image_tensor_shape_and_range(self):
        cfg = SceneConfig()
        img, _, _ = gen_scene(cfg, 0)
        assert img.dims == (1, 3, cfg.image_h, cfg.image_w)
        assert img.data.min() >= 0.0 and img.data.max() <= 1.0

    def test_bad_ranges_rejected(self):
        with pytest.raises(ConfigError):
            SceneConfig(ped_count_min=5, ped_count_max=2)
        with pytest.raises(ConfigError):
            SceneConfig(coverage_min=0.0)
        with pytest.raises(ConfigError):
            SceneConfig(ped_height_max=4000)


class TestDatasetIO:
    def test_write_and_load_roundtrip(self, tmp_path):
        cfg = SceneConfig(ped_count_min=1, ped_count_max=2)
        ids = write_dataset(cfg, tmp_path / "data", count=4)
        assert len(ids) == 4
        items = load_dataset(tmp_path / "data")
        assert [i for i, _, _ in items] == ids
        for _id, tensor, anns in items:
            assert tensor.dims == (1, 3, cfg.image_h, cfg.image_w)
            assert len(anns) >= 1
            # visibility restored from the stored boxes
            for a in anns:
                assert 0.0 < a.visibility <= 1.0

    def test_loaded_pixels_match_generated(self, tmp_path):
        cfg = SceneConfig()
        write_dataset(cfg, tmp_path / "d", count=1)
        (image_id, tensor, _anns), = load_dataset(tmp_path / "d")
        img, _, gen_id = gen_scene(cfg, 0)
        assert image_id == gen_id
        np.testing.assert_array_equal(tensor.data, img.data)

    def test_missing_dir_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_dataset(tmp_path / "nope")
