"""Ablation sweeps on the fixed-seed synthetic benchmark.

Every variant trains with the shared seed on the same generated data and
is scored on a held-out split, mirroring the paper-style comparison
tables: rows are variants, columns are subsets.
"""

from __future__ import annotations

from dataclasses import replace

from ..errors import ConfigError
from ..evaluation import EvalCurve
from .config import TrainConfig
from .scenes import SceneConfig
from .training import evaluate, train

SQUEEZE_SWEEP = (1, 2, 4, 8, 16, 32)
GATE_SWEEP = ("spatio", "channel", "none")
DEFORMABLE_SWEEP = (True, False)
DEFAULT_SUBSETS = ("reasonable", "small", "occlusion", "all")

# the desk benchmark: fixed split sizes, validation drawn from a disjoint
# seed stream
TRAIN_SCENES = 50
VAL_SCENES = 20
VAL_SEED_OFFSET = 10_000


def benchmark_datasets(scene_cfg: SceneConfig, train_count: int = TRAIN_SCENES,
                       val_count: int = VAL_SCENES):
    """Generate the in-memory train/val splits for ablation runs."""
    from .scenes import SceneSkipped, gen_scene

    def make(cfg, count):
        items, index = [], 0
        while len(items) < count:
            try:
                tensor, anns, image_id = gen_scene(cfg, index)
                items.append((image_id, tensor, anns))
            except SceneSkipped:
                pass
            index += 1
        return items

    val_cfg = replace(scene_cfg, seed=scene_cfg.seed + VAL_SEED_OFFSET)
    return make(scene_cfg, train_count), make(val_cfg, val_count)


def variants_for_axis(base: TrainConfig, axis: str):
    if axis == "squeeze_ratio":
        return [(f"r={r}", replace(base, squeeze_ratio=r))
                for r in SQUEEZE_SWEEP]
    if axis == "gate_kind":
        return [(kind, replace(base, gate_kind=kind)) for kind in GATE_SWEEP]
    if axis == "deformable":
        return [("deformable" if v else "plain",
                 replace(base, use_deformable=v)) for v in DEFORMABLE_SWEEP]
    raise ConfigError(f"unknown ablation axis {axis!r}; options: "
                      f"squeeze_ratio, gate_kind, deformable")


def ablate(base: TrainConfig, axis: str, scene_cfg: SceneConfig,
           subsets=DEFAULT_SUBSETS, datasets=None):
    """Train and evaluate each variant; returns ordered result rows.

    Each row is (label, {subset: mr2-or-message}).
    """
    if datasets is None:
        datasets = benchmark_datasets(scene_cfg)
    train_set, val_set = datasets

    rows = []
    for label, cfg in variants_for_axis(base, axis):
        ckpt, _log, _meta = train(cfg, train_set, scene_cfg=scene_cfg)
        report = evaluate(ckpt, val_set, subsets, cfg, scene_cfg=scene_cfg)
        cells = {}
        for name in subsets:
            r = report[name]
            cells[name] = r.mr2 if isinstance(r, EvalCurve) else str(r)
        rows.append((label, cells))
    return rows


def format_table(rows, subsets=DEFAULT_SUBSETS) -> str:
    """Paper-style comparison table, MR_-2 percentages per subset."""
    header = ["variant"] + [s for s in subsets]
    widths = [max(len(header[0]), *(len(r[0]) for r in rows))]
    widths += [max(len(h), 8) for h in header[1:]]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for label, cells in rows:
        cols = [label.ljust(widths[0])]
        for i, s in enumerate(subsets):
            v = cells[s]
            txt = f"{v:.2f}" if isinstance(v, float) else str(v)
            cols.append(txt.ljust(widths[i + 1]))
        lines.append("  ".join(cols))
    return "\n".join(lines)
