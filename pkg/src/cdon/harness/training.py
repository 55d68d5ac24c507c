"""End-to-end joint training and the evaluation runner.

One image per step.  The RPN objective (anchor classification plus box
regression) and the RoI-head objective (Eq. of the detection loss over the
sampled proposals) are both computed with the same loss machinery, each
normalized by its own sample count, and their sum is back-propagated
through every layer of both branches.  NaN anywhere aborts with a
diagnostic dump.  Everything is deterministic in (seed, config).
"""

from __future__ import annotations

import json
import time
import warnings
from pathlib import Path

import numpy as np

from ..autodiff import Graph, Tensor4, add, backward, scale
from ..errors import NumericError, UsageError
from ..evaluation import (
    SUBSETS,
    EvalCurve,
    filter_subset,
    fppi_mr_curve,
    log_avg_miss_rate,
    match_detections,
)
from ..geometry import Box, assign_labels, sample_minibatch
from ..heads import OptimState, detection_loss, lr_schedule, ohem_select, \
    sgd_step
from .checkpoint import Checkpoint
from .config import TrainConfig, config_hash
from .network import CoupledNetwork, build_network, gather_rows


def _targets_from_labels(labeled, idx):
    labels = np.array([1 if labeled[i].label == "positive" else 0
                       for i in idx], dtype=np.int64)
    targets = np.zeros((len(idx), 4))
    for row, i in enumerate(idx):
        if labeled[i].target_deltas is not None:
            targets[row] = labeled[i].target_deltas
    return labels, targets


GT_JITTERS = 4


def _gt_proposals(gts, rng, image_hw):
    """Ground-truth boxes and small jittered copies, clipped to the image."""
    ih, iw = image_hw
    out = []
    for g in gts:
        if g.ignore:
            continue
        b = g.full
        out.append(b)
        for _ in range(GT_JITTERS):
            dx, dy = rng.uniform(-0.08, 0.08, 2)
            sw, sh = rng.uniform(0.92, 1.08, 2)
            w, h = b.width * sw, b.height * sh
            cx = 0.5 * (b.x1 + b.x2) + dx * b.width
            cy = 0.5 * (b.y1 + b.y2) + dy * b.height
            x1 = min(max(cx - w / 2, 0.0), iw - 2.0)
            y1 = min(max(cy - h / 2, 0.0), ih - 2.0)
            x2 = min(max(cx + w / 2, x1 + 2.0), float(iw))
            y2 = min(max(cy + h / 2, y1 + 2.0), float(ih))
            out.append(Box(x1, y1, x2, y2))
    return out


def train_step(net: CoupledNetwork, image: Tensor4, annotations, step: int,
               state: OptimState, cfg: TrainConfig) -> dict:
    """One optimization step; returns the log row as a dict."""
    graph = Graph()
    gts = [a for a in annotations]

    maps = net.forward_backbone(image, graph)
    deep = maps["block5"]
    cls_rows, reg_rows = net.rpn_forward(deep, graph)
    anchors = net.anchors_for(deep)

    # anchor-level objective
    rpn_labeled = assign_labels(anchors, gts)
    rpn_rng = np.random.default_rng([cfg.seed, step, 1])
    rpn_idx = sample_minibatch(rpn_labeled, total=cfg.minibatch,
                               pos_fraction=0.5, rng=rpn_rng)
    loss_parts = []
    log = {"step": step, "lr": state.lr, "cls_loss": 0.0, "reg_loss": 0.0,
           "total": 0.0}
    if rpn_idx:
        labels, targets = _targets_from_labels(rpn_labeled, rpn_idx)
        sel_cls = gather_rows(cls_rows, rpn_idx, graph)
        sel_reg = gather_rows(reg_rows, rpn_idx, graph)
        rpn_terms = detection_loss(sel_cls, sel_reg, labels, targets,
                                   graph=graph)
        loss_parts.append(scale(rpn_terms.node, 1.0 / len(rpn_idx), graph))

    # proposal-level objective; ground-truth boxes (plus a few jittered
    # copies) join the pool so the head sees a usable share of positives
    # while the RPN is still warming up
    proposals, _scores = net.make_proposals(anchors, cls_rows.data,
                                            reg_rows.data,
                                            (image.h, image.w))
    jit_rng = np.random.default_rng([cfg.seed, step, 3])
    proposals = proposals + _gt_proposals(gts, jit_rng, (image.h, image.w))
    n_det = 0
    if proposals:
        labeled = assign_labels(proposals, gts)
        head_rng = np.random.default_rng([cfg.seed, step, 2])
        idx = sample_minibatch(labeled, total=cfg.minibatch,
                               pos_fraction=0.5, rng=head_rng)
        if idx:
            boxes = [labeled[i].box for i in idx]
            labels, targets = _targets_from_labels(labeled, idx)
            feat_gate, feat_occ = net.extract_roi_features(maps, boxes, graph)
            cls, reg = net.forward_heads(feat_gate, feat_occ, graph)

            include = None
            if cfg.use_ohem:
                probe = detection_loss(cls, reg, labels, targets)
                include = ohem_select(probe.per_roi, n=cfg.ohem_n)
            terms = detection_loss(cls, reg, labels, targets,
                                   include=include, graph=graph)
            n_det = len(idx) if include is None else min(len(idx),
                                                         len(include))
            loss_parts.append(scale(terms.node, 1.0 / n_det, graph))
            log["cls_loss"] = terms.cls / n_det
            log["reg_loss"] = terms.reg / n_det
            log["total"] = terms.total / n_det

    if not loss_parts:
        return log
    total = loss_parts[0]
    for part in loss_parts[1:]:
        total = add(total, part, graph)
    if not np.isfinite(total.item()):
        raise NumericError(f"step {step}: loss is not finite")

    backward(graph, total)
    grads = {name: t.grad for name, t in net.params.items()
             if t.grad is not None}
    sgd_step(net.params, grads, state)
    net.zero_grads()
    return log


def make_checkpoint(net: CoupledNetwork, state: OptimState, step: int,
                    cfg_hash: str) -> Checkpoint:
    return Checkpoint(version=1, params=net.export_params(),
                      velocities={k: v.copy()
                                  for k, v in state.velocity.items()},
                      step=step, config_hash=cfg_hash)


def train(cfg: TrainConfig, dataset, scene_cfg=None, log_path=None,
          checkpoint_dir=None):
    """Train on a generated dataset; returns (Checkpoint, log rows).

    The config hash stored in the checkpoint covers the scene config too
    when one is supplied, so evaluation refuses mismatched data recipes.
    """
    if not dataset:
        raise UsageError("training needs a non-empty dataset")
    from .scenes import SceneConfig

    net = build_network(cfg)
    state = OptimState(lr=cfg.lr_base, momentum=cfg.momentum,
                       weight_decay=cfg.weight_decay)
    cfg_hash = config_hash(scene_cfg if scene_cfg is not None
                           else SceneConfig(), cfg)

    rows = []
    t0 = time.time()
    for step in range(cfg.total_steps):
        state.lr = lr_schedule(step, cfg.lr_base, cfg.lr_drops,
                               warmup_steps=cfg.warmup_steps,
                               warmup_lr=cfg.lr_warmup)
        image_id, image, anns = dataset[step % len(dataset)]
        try:
            row = train_step(net, image, anns, step, state, cfg)
        except NumericError as exc:
            dump = {
                "step": step,
                "image_id": image_id,
                "lr": state.lr,
                "error": str(exc),
                "recent_rows": rows[-5:],
            }
            dump_path = Path(log_path).with_suffix(".crash.json") \
                if log_path else Path("cdon_crash.json")
            dump_path.write_text(json.dumps(dump, indent=2))
            raise NumericError(
                f"{exc} (diagnostics written to {dump_path})") from exc
        rows.append(row)
        if (checkpoint_dir and cfg.checkpoint_every
                and (step + 1) % cfg.checkpoint_every == 0):
            from .checkpoint import save_checkpoint

            save_checkpoint(make_checkpoint(net, state, step + 1, cfg_hash),
                            Path(checkpoint_dir) / f"step{step + 1:06d}.ckpt")

    rows_meta = {"wall_time_s": time.time() - t0}
    if log_path:
        write_training_log(log_path, rows)
    ckpt = make_checkpoint(net, state, cfg.total_steps, cfg_hash)
    return ckpt, rows, rows_meta


def write_training_log(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,lr,cls_loss,reg_loss,total\n")
        for r in rows:
            f.write(f"{r['step']},{r['lr']!r},{r['cls_loss']!r},"
                    f"{r['reg_loss']!r},{r['total']!r}\n")


def restore_network(ckpt: Checkpoint, cfg: TrainConfig) -> CoupledNetwork:
    net = build_network(cfg)
    net.load_params(ckpt.params)
    return net


def evaluate(ckpt: Checkpoint, dataset, subset_names, cfg: TrainConfig,
             scene_cfg=None, expected_hash: str | None = None,
             workers: int = 1) -> dict:
    """Run inference over a dataset and score the requested subsets.

    Returns {subset: EvalCurve-with-mr2} — or a message string where a
    subset has no evaluated ground truths.  A checkpoint whose config hash
    disagrees with the supplied configs is refused.
    """
    from .scenes import SceneConfig

    want = expected_hash if expected_hash is not None else config_hash(
        scene_cfg if scene_cfg is not None else SceneConfig(), cfg)
    if ckpt.config_hash and ckpt.config_hash != want:
        raise UsageError(
            f"checkpoint config hash {ckpt.config_hash[:12]} does not match "
            f"current config {want[:12]}; refusing to evaluate")

    net = restore_network(ckpt, cfg)
    per_image = run_inference(net, dataset, workers=workers)
    return score_detections(per_image, subset_names)


def run_inference(net: CoupledNetwork, dataset, workers: int = 1):
    """Detections per image, in dataset order."""
    def one(item):
        image_id, image, anns = item
        return image_id, net.inference(image, image_id), anns

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, dataset))
    return [one(item) for item in dataset]


def score_detections(per_image, subset_names) -> dict:
    report = {}
    for name in subset_names:
        if name not in SUBSETS:
            raise UsageError(f"unknown subset {name!r}; "
                             f"options: {sorted(SUBSETS)}")
        spec = SUBSETS[name]
        outcomes = []
        for image_id, dets, anns in per_image:
            evaluated, ignored = filter_subset(anns, spec)
            outcomes.append(match_detections(dets, evaluated, ignored))
        if sum(o.n_evaluated for o in outcomes) == 0:
            report[name] = "no evaluated ground truths"
            continue
        curve = fppi_mr_curve(outcomes)
        curve.mr2 = log_avg_miss_rate(curve)
        report[name] = curve
    return report
