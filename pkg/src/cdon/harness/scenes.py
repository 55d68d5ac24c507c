"""Synthetic street-scene stand-in: textured rectangles as pedestrians.

Each scene is a textured background with a few striped, pedestrian-shaped
rectangles (aspect ratio around 0.41).  An occluder may cover a full-width
or full-height strip of an instance, so the visible region stays
rectangular and the stored visibility equals the uncovered pixel ratio
exactly.  Everything is deterministic in (seed, index).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..autodiff import Tensor4
from ..errors import CdonError, ConfigError
from ..geometry import (
    Annotation,
    Box,
    annotations_to_record,
    record_to_annotations,
)


class SceneSkipped(CdonError):
    """No pedestrian could be placed after bounded retries."""


@dataclass
class SceneConfig:
    image_h: int = 128
    image_w: int = 128
    ped_count_min: int = 2
    ped_count_max: int = 5
    ped_height_min: int = 40
    ped_height_max: int = 104
    aspect_mean: float = 0.41
    aspect_jitter: float = 0.05
    occluder_prob: float = 0.5
    coverage_min: float = 0.35
    coverage_max: float = 0.8
    texture_seed: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.ped_count_min > self.ped_count_max:
            raise ConfigError("pedestrian count range is empty")
        if self.ped_height_min > self.ped_height_max:
            raise ConfigError("pedestrian height range is empty")
        if not (0 < self.coverage_min <= self.coverage_max < 1):
            raise ConfigError("coverage range must sit strictly inside (0, 1)")
        if self.ped_height_max > min(self.image_h, self.image_w):
            raise ConfigError("pedestrians taller than the image")


def _value_noise(rng, h, w, cell=16, lo=40, hi=160):
    """Smooth-ish background: coarse random grid blown up plus fine grain."""
    gh, gw = h // cell + 2, w // cell + 2
    coarse = rng.uniform(lo, hi, (gh, gw, 3))
    ys = np.linspace(0, gh - 1.001, h)
    xs = np.linspace(0, gw - 1.001, w)
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    img = ((1 - fy) * (1 - fx) * coarse[y0][:, x0]
           + (1 - fy) * fx * coarse[y0][:, x0 + 1]
           + fy * (1 - fx) * coarse[y0 + 1][:, x0]
           + fy * fx * coarse[y0 + 1][:, x0 + 1])
    img += rng.normal(0, 6, (h, w, 3))
    return img


def _ped_texture(rng, h, w):
    """Bright striped block so instances are separable from the background."""
    base = rng.uniform(170, 240, 3)
    stripes = 30.0 * np.sin(
        np.arange(w)[None, :] * rng.uniform(0.5, 1.5)
        + rng.uniform(0, 6.28))[..., None]
    tex = base[None, None, :] + stripes + rng.normal(0, 8, (h, w, 3))
    return tex


def _occluder_texture(rng, h, w):
    base = rng.uniform(10, 70, 3)
    return base[None, None, :] + rng.normal(0, 5, (h, w, 3))


def _boxes_intersect(a: Box, b: Box) -> bool:
    return not (a.x2 <= b.x1 or b.x2 <= a.x1 or a.y2 <= b.y1 or b.y2 <= a.y1)


def gen_scene(cfg: SceneConfig, index: int, with_occluders: bool = False):
    """Render scene `index`: (image Tensor4 (1,3,h,w), annotations, image_id).

    With `with_occluders` the occluder rectangles are appended to the
    return, which the raster-accounting tests use as an oracle input.
    Raises SceneSkipped when not a single pedestrian fits after retries.
    """
    rng = np.random.default_rng([cfg.seed, cfg.texture_seed, index])
    h, w = cfg.image_h, cfg.image_w
    img = _value_noise(rng, h, w)

    n_ped = int(rng.integers(cfg.ped_count_min, cfg.ped_count_max + 1))
    placed: list[Box] = []
    anns: list[Annotation] = []
    occluders: list[Box] = []

    for _ in range(n_ped):
        for _attempt in range(50):
            ph = int(rng.integers(cfg.ped_height_min, cfg.ped_height_max + 1))
            aspect = cfg.aspect_mean + rng.normal(0, cfg.aspect_jitter)
            pw = max(4, int(round(max(0.2, aspect) * ph)))
            if pw >= w or ph >= h:
                continue
            x1 = int(rng.integers(0, w - pw + 1))
            y1 = int(rng.integers(0, h - ph + 1))
            box = Box(float(x1), float(y1), float(x1 + pw), float(y1 + ph))
            if any(_boxes_intersect(box, other) for other in placed):
                continue
            placed.append(box)
            img[y1:y1 + ph, x1:x1 + pw] = _ped_texture(rng, ph, pw)

            # occluder strips stay inside the instance box, so visibility
            # accounting never leaks across adjacent instances
            visible = box
            if rng.uniform() < cfg.occluder_prob:
                q = rng.uniform(cfg.coverage_min, cfg.coverage_max)
                side = ["bottom", "top", "left", "right"][int(rng.integers(4))]
                if side in ("bottom", "top"):
                    cov = min(max(int(round(q * ph)), 1), ph - 1)
                    if side == "bottom":
                        oy1, oy2 = y1 + ph - cov, y1 + ph
                        visible = Box(box.x1, box.y1, box.x2, float(oy1))
                    else:
                        oy1, oy2 = y1, y1 + cov
                        visible = Box(box.x1, float(oy2), box.x2, box.y2)
                    ox1, ox2 = x1, x1 + pw
                else:
                    cov = min(max(int(round(q * pw)), 1), pw - 1)
                    if side == "right":
                        ox1, ox2 = x1 + pw - cov, x1 + pw
                        visible = Box(box.x1, box.y1, float(ox1), box.y2)
                    else:
                        ox1, ox2 = x1, x1 + cov
                        visible = Box(float(ox2), box.y1, box.x2, box.y2)
                    oy1, oy2 = y1, y1 + ph
                img[oy1:oy2, ox1:ox2] = _occluder_texture(
                    rng, oy2 - oy1, ox2 - ox1)
                occluders.append(Box(float(ox1), float(oy1),
                                     float(ox2), float(oy2)))
            anns.append(Annotation(full=box, visible=visible))
            break

    if not anns:
        raise SceneSkipped(f"scene {index}: no pedestrian placement found")

    raster = np.clip(img, 0, 255).astype(np.uint8)
    tensor = Tensor4(raster.transpose(2, 0, 1)[None].astype(np.float64) / 255.0)
    if with_occluders:
        return tensor, anns, f"img{index:06d}", occluders
    return tensor, anns, f"img{index:06d}"


def raster_visibility(anns, raster_shape, occluded_mask) -> list[float]:
    """Oracle helper: uncovered-pixel ratio per annotation on a raster mask."""
    out = []
    for a in anns:
        x1, y1, x2, y2 = (int(a.full.x1), int(a.full.y1),
                          int(a.full.x2), int(a.full.y2))
        total = (x2 - x1) * (y2 - y1)
        covered = occluded_mask[y1:y2, x1:x2].sum()
        out.append((total - covered) / total)
    return out


def write_dataset(cfg: SceneConfig, out_dir, count: int,
                  workers: int = 1) -> list[str]:
    """Generate `count` scenes into out_dir: one .npy per image plus
    annotations.jsonl; skipped indices are replaced by later ones."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    ids = []
    index = 0
    produced = 0
    while produced < count:
        try:
            tensor, anns, image_id = gen_scene(cfg, index)
        except SceneSkipped as exc:
            warnings.warn(str(exc))
            index += 1
            continue
        raster = (tensor.data[0].transpose(1, 2, 0) * 255.0).round()
        np.save(out / f"{image_id}.npy", raster.astype(np.uint8))
        records.append(annotations_to_record(image_id, anns))
        ids.append(image_id)
        produced += 1
        index += 1
    with open(out / "annotations.jsonl", "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    return ids


def load_dataset(data_dir):
    """Read a generated dataset: list of (image_id, Tensor4, annotations)."""
    root = Path(data_dir)
    ann_path = root / "annotations.jsonl"
    if not ann_path.exists():
        raise ConfigError(f"no annotations.jsonl under {root}")
    items = []
    with open(ann_path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            image_id, anns = record_to_annotations(json.loads(line))
            raster = np.load(root / f"{image_id}.npy")
            tensor = Tensor4(
                raster.transpose(2, 0, 1)[None].astype(np.float64) / 255.0)
            items.append((image_id, tensor, anns))
    return items
