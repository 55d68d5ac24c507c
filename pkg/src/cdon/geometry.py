"""Boxes, anchors, IoU label assignment, delta coding, NMS and sampling.

The proposal machinery of the detector: everything here is a pure function
over plain dataclasses, safe for concurrent use.  Anchors use a single
width/height ratio with a configurable scale ladder; labels follow the
0.7 / 0.3 overlap rule with a highest-overlap fallback so every reachable
ground truth owns at least one positive.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, UsageError

POS_IOU_THRESH = 0.7
NEG_IOU_THRESH = 0.3

# geometric ladder from 32 to 512 px (ratio sqrt 2); the count is fixed at
# nine, the values are configuration
DEFAULT_ANCHOR_SCALES = tuple(32.0 * 2 ** (i / 2) for i in range(9))
DEFAULT_ANCHOR_RATIO = 0.41


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle, corner-coded in pixels."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise DimensionError(f"box corners out of order: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2])


@dataclass
class Annotation:
    """Ground-truth instance: full extent, visible extent, ignore flag.

    Visibility is the visible-to-full area ratio; it is computed when not
    supplied and validated to 1e-6 when it is.
    """

    full: Box
    visible: Box
    visibility: float = None  # type: ignore[assignment]
    ignore: bool = False

    def __post_init__(self):
        eps = 1e-6
        v, f = self.visible, self.full
        if (v.x1 < f.x1 - eps or v.y1 < f.y1 - eps
                or v.x2 > f.x2 + eps or v.y2 > f.y2 + eps):
            raise DimensionError("visible box extends outside full box")
        ratio = v.area / f.area if f.area > 0 else 0.0
        if self.visibility is None:
            self.visibility = ratio
        elif abs(self.visibility - ratio) > 1e-6:
            raise DimensionError(
                f"visibility {self.visibility} != area ratio {ratio:.8f}")


@dataclass
class AnchorConfig:
    """Single-ratio anchor grid: 9 heights, width = ratio * height."""

    ratio: float = DEFAULT_ANCHOR_RATIO
    scales: Sequence[float] = DEFAULT_ANCHOR_SCALES
    stride: int = 16

    def __post_init__(self):
        if self.ratio <= 0:
            raise DimensionError(f"anchor ratio must be positive, got {self.ratio}")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise DimensionError("anchor scales must be strictly increasing")


@dataclass
class LabeledProposal:
    box: Box
    label: str  # "positive" | "negative" | "ignore"
    matched_gt: int | None = None
    target_deltas: np.ndarray | None = None


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint or degenerate boxes."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def _iou_matrix(boxes: Sequence[Box], others: Sequence[Box]) -> np.ndarray:
    """(len(boxes), len(others)) pairwise IoU, vectorized."""
    if not boxes or not others:
        return np.zeros((len(boxes), len(others)))
    a = np.array([b.as_array() for b in boxes])
    b = np.array([o.as_array() for o in others])
    ix = (np.minimum(a[:, None, 2], b[None, :, 2])
          - np.maximum(a[:, None, 0], b[None, :, 0]))
    iy = (np.minimum(a[:, None, 3], b[None, :, 3])
          - np.maximum(a[:, None, 1], b[None, :, 1]))
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def generate_anchors(map_h: int, map_w: int, cfg: AnchorConfig) -> list[Box]:
    """One anchor per (position, scale), centered on feature-cell centers.

    Anchor (i, j, s) sits at ((j + 0.5) * stride, (i + 0.5) * stride) with
    height s and width ratio * s, so width / height equals the configured
    ratio exactly.  Order: rows, then columns, then scales.
    """
    if map_h < 1 or map_w < 1:
        raise DimensionError(f"map dims must be positive, got {map_h}x{map_w}")
    anchors = []
    for i in range(map_h):
        cy = (i + 0.5) * cfg.stride
        for j in range(map_w):
            cx = (j + 0.5) * cfg.stride
            for s in cfg.scales:
                h = float(s)
                w = cfg.ratio * h
                anchors.append(Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
    return anchors


def encode_deltas(anchor: Box, gt: Box) -> np.ndarray:
    """Center/log-size regression target (dx, dy, dw, dh)."""
    if anchor.width <= 0 or anchor.height <= 0:
        raise UsageError(f"anchor has non-positive size: {anchor}")
    if gt.width <= 0 or gt.height <= 0:
        raise UsageError(f"ground truth has non-positive size: {gt}")
    ax, ay = anchor.center
    gx, gy = gt.center
    return np.array([
        (gx - ax) / anchor.width,
        (gy - ay) / anchor.height,
        math.log(gt.width / anchor.width),
        math.log(gt.height / anchor.height),
    ])


def decode_deltas(anchor: Box, d: Sequence[float]) -> Box:
    """Inverse of encode_deltas: decode(encode(a, g)) == g to 1e-9."""
    if anchor.width <= 0 or anchor.height <= 0:
        raise UsageError(f"anchor has non-positive size: {anchor}")
    dx, dy, dw, dh = (float(v) for v in d)
    ax, ay = anchor.center
    cx = ax + dx * anchor.width
    cy = ay + dy * anchor.height
    w = anchor.width * math.exp(dw)
    h = anchor.height * math.exp(dh)
    return Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def assign_labels(proposals: Sequence[Box],
                  gts: Sequence[Annotation]) -> list[LabeledProposal]:
    """Binary labels by overlap: > 0.7 (or per-gt best) positive, < 0.3 negative.

    Overlaps in between are ignored, as is any proposal whose best overlap
    lands on an ignore-region.  matched_gt is the argmax-IoU real ground
    truth, ties broken by lowest index; positives carry encoded box deltas.
    """
    real_idx = [i for i, g in enumerate(gts) if not g.ignore]
    real_boxes = [gts[i].full for i in real_idx]
    ign_boxes = [g.full for g in gts if g.ignore]

    m_real = _iou_matrix(list(proposals), real_boxes)   # (P, R)
    m_ign = _iou_matrix(list(proposals), ign_boxes)     # (P, I)

    # per-gt best proposals (the "highest IoU" fallback); ties all positive
    best_for_gt = np.zeros(len(proposals), dtype=bool)
    if real_boxes and len(proposals):
        col_max = m_real.max(axis=0)
        for gj in range(len(real_boxes)):
            if col_max[gj] > 0:
                best_for_gt |= m_real[:, gj] == col_max[gj]

    out = []
    for pi, box in enumerate(proposals):
        best_real = float(m_real[pi].max()) if real_boxes else 0.0
        best_ign = float(m_ign[pi].max()) if ign_boxes else 0.0

        if best_ign > best_real and best_ign > 0:
            out.append(LabeledProposal(box, "ignore"))
            continue

        if real_boxes and (best_real > POS_IOU_THRESH or best_for_gt[pi]):
            gt_i = real_idx[int(np.argmax(m_real[pi]))]  # lowest index wins ties
            out.append(LabeledProposal(
                box, "positive", matched_gt=gt_i,
                target_deltas=encode_deltas(box, gts[gt_i].full)))
        elif best_real < NEG_IOU_THRESH:
            out.append(LabeledProposal(box, "negative"))
        else:
            out.append(LabeledProposal(box, "ignore"))
    return out


def nms(boxes: Sequence[Box], scores: Sequence[float],
        iou_thresh: float) -> list[int]:
    """Greedy descending-score suppression; score ties keep the lower index."""
    if len(boxes) != len(scores):
        raise DimensionError(
            f"nms: {len(boxes)} boxes vs {len(scores)} scores")
    n = len(boxes)
    if n == 0:
        return []
    arr = np.array([b.as_array() for b in boxes])
    area = (arr[:, 2] - arr[:, 0]) * (arr[:, 3] - arr[:, 1])
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        if kept:
            k = arr[kept]
            ix = np.minimum(arr[i, 2], k[:, 2]) - np.maximum(arr[i, 0], k[:, 0])
            iy = np.minimum(arr[i, 3], k[:, 3]) - np.maximum(arr[i, 1], k[:, 1])
            inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
            union = area[i] + area[kept] - inter
            ious = np.where(union > 0, inter / np.where(union > 0, union, 1.0),
                            0.0)
            if (ious > iou_thresh).any():
                continue
        kept.append(i)
    return kept


def sample_minibatch(labeled: Sequence[LabeledProposal], total: int = 256,
                     pos_fraction: float = 0.5,
                     rng: np.random.Generator | None = None) -> list[int]:
    """Pick up to `total` indices, positives capped at ceil(pos_fraction * total).

    Negatives fill the remainder; ignore-labeled proposals are never
    sampled.  Deterministic for a fixed rng state.
    """
    if total <= 0:
        raise UsageError(f"minibatch total must be positive, got {total}")
    if rng is None:
        rng = np.random.default_rng(0)
    pos = [i for i, lp in enumerate(labeled) if lp.label == "positive"]
    neg = [i for i, lp in enumerate(labeled) if lp.label == "negative"]
    if not pos and not neg:
        return []

    cap = math.ceil(pos_fraction * total)
    n_pos = min(len(pos), cap)
    take_pos = [pos[k] for k in rng.permutation(len(pos))[:n_pos]]
    n_neg = min(len(neg), total - n_pos)
    take_neg = [neg[k] for k in rng.permutation(len(neg))[:n_neg]]
    return sorted(take_pos + take_neg)


# ---------------------------------------------------------------------------
# Annotation interchange (JSON lines, one record per image)
# ---------------------------------------------------------------------------

def annotations_to_record(image_id: str,
                          anns: Sequence[Annotation]) -> dict:
    return {
        "image_id": image_id,
        "boxes": [
            {
                "x1": a.full.x1, "y1": a.full.y1,
                "x2": a.full.x2, "y2": a.full.y2,
                "vx1": a.visible.x1, "vy1": a.visible.y1,
                "vx2": a.visible.x2, "vy2": a.visible.y2,
                "ignore": a.ignore,
            }
            for a in anns
        ],
    }


def record_to_annotations(rec: dict) -> tuple[str, list[Annotation]]:
    anns = []
    for b in rec["boxes"]:
        anns.append(Annotation(
            full=Box(b["x1"], b["y1"], b["x2"], b["y2"]),
            visible=Box(b["vx1"], b["vy1"], b["vx2"], b["vy2"]),
            ignore=bool(b["ignore"])))
    return rec["image_id"], anns


def save_annotations(path, items) -> None:
    """items: iterable of (image_id, [Annotation]); one JSON line each."""
    with open(path, "w", encoding="utf-8") as f:
        for image_id, anns in items:
            f.write(json.dumps(annotations_to_record(image_id, anns)) + "\n")


def load_annotations(path) -> list[tuple[str, list[Annotation]]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(record_to_annotations(json.loads(line)))
    return out
