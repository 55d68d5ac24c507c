"""Benchmark protocol: subset filters, matching, FPPI curves, MR_-2.

Ground truths are split by height and visibility into evaluated and ignored
sets.  Detections greedily match evaluated ground truths in descending
score order; a detection whose only overlap is an ignored annotation counts
neither way.  Sweeping the score threshold yields (FPPI, miss rate) points,
summarized by the log-average miss rate over FPPI in [1e-2, 1], reported as
a percentage.

Greedy matching is prefix-stable in score order: the outcome of a detection
depends only on higher-scored ones, so one full match pass plus cumulative
counting reproduces a per-threshold re-match exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .geometry import Annotation, Box, iou

MR2_REFS = tuple(np.logspace(-2, 0, 9))
MISS_RATE_FLOOR = 1e-6
MATCH_IOU_THRESH = 0.5


@dataclass(frozen=True)
class SubsetSpec:
    """Height/visibility window selecting which annotations are evaluated."""

    name: str
    height_range: tuple[float, float]
    visibility_range: tuple[float, float]

    def __post_init__(self):
        if (self.height_range[0] > self.height_range[1]
                or self.visibility_range[0] > self.visibility_range[1]):
            raise UsageError(f"subset {self.name!r} has an empty range")

    def admits(self, ann: Annotation) -> bool:
        h = ann.full.height
        return (self.height_range[0] <= h <= self.height_range[1]
                and self.visibility_range[0] <= ann.visibility
                <= self.visibility_range[1])


INF = float("inf")

SUBSETS = {
    "reasonable": SubsetSpec("reasonable", (50, INF), (0.65, 1.0)),
    "small": SubsetSpec("small", (50, 75), (0.65, 1.0)),
    "occlusion": SubsetSpec("occlusion", (50, INF), (0.2, 0.65)),
    "all": SubsetSpec("all", (20, INF), (0.2, 1.0)),
    # Caltech-style presets
    "medium": SubsetSpec("medium", (30, 80), (0.2, 1.0)),
    "heavy": SubsetSpec("heavy", (50, INF), (0.2, 0.65)),
}


@dataclass
class Detection:
    image_id: str
    box: Box
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise UsageError(f"detection score must be finite: {self.score}")


@dataclass
class EvalCurve:
    """(fppi, miss_rate) points ordered by fppi, plus the MR_-2 summary."""

    points: list[tuple[float, float]]
    mr2: float | None = None


@dataclass
class ImageOutcome:
    """Matching result for one image at the all-detections operating point.

    det_flags keeps (score, kind) per detection, kind in {"tp", "fp",
    "ignored"}, which is enough to rebuild any score threshold.
    """

    tp: int
    fp: int
    missed: int
    n_evaluated: int
    det_flags: list[tuple[float, str]] = field(default_factory=list)


def filter_subset(annotations, spec: SubsetSpec):
    """Split annotations into (evaluated, ignored) under the subset window.

    Ignore-flagged annotations always land in the ignored set, as do those
    outside the height or visibility range; they can still absorb
    detections without credit or penalty.
    """
    evaluated, ignored = [], []
    for ann in annotations:
        if not ann.ignore and spec.admits(ann):
            evaluated.append(ann)
        else:
            ignored.append(ann)
    return evaluated, ignored


def match_detections(dets, evaluated, ignored,
                     iou_thresh: float = MATCH_IOU_THRESH) -> ImageOutcome:
    """Greedy per-image matching in descending score order.

    Each detection takes the unmatched evaluated gt of highest IoU >= the
    threshold; failing that, overlap with any ignored annotation makes it
    neutral; otherwise it is a false positive.  Ties in score keep the
    lower detection index first.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken = [False] * len(evaluated)
    flags: list[tuple[float, str]] = []
    tp = fp = 0
    for di in order:
        det = dets[di]
        best_iou, best_gt = 0.0, -1
        for gi, gt in enumerate(evaluated):
            if taken[gi]:
                continue
            v = iou(det.box, gt.full)
            if v >= iou_thresh and v > best_iou:
                best_iou, best_gt = v, gi
        if best_gt >= 0:
            taken[best_gt] = True
            tp += 1
            flags.append((det.score, "tp"))
        elif any(iou(det.box, ig.full) >= iou_thresh for ig in ignored):
            flags.append((det.score, "ignored"))
        else:
            fp += 1
            flags.append((det.score, "fp"))
    return ImageOutcome(tp=tp, fp=fp, missed=len(evaluated) - tp,
                        n_evaluated=len(evaluated), det_flags=flags)


def fppi_mr_curve(outcomes, thresholds=None) -> EvalCurve:
    """Sweep score thresholds into an (FPPI, miss rate) curve.

    By default every distinct detection score is a threshold; an explicit
    score grid can be supplied instead.  Raises when no ground truth is
    evaluated anywhere (the miss rate would be undefined).
    """
    outcomes = list(outcomes)
    if not outcomes:
        raise UsageError("fppi_mr_curve needs at least one image")
    n_images = len(outcomes)
    total_gts = sum(o.n_evaluated for o in outcomes)
    if total_gts == 0:
        raise UsageError("no evaluated ground truths: miss rate undefined")

    flags = [fl for o in outcomes for fl in o.det_flags]
    if thresholds is None:
        thresholds = sorted({s for s, _ in flags}, reverse=True)
    else:
        thresholds = sorted(set(thresholds), reverse=True)
    if not flags or not thresholds:
        return EvalCurve(points=[(0.0, 1.0)])

    scores = np.array([s for s, _ in flags])
    kinds = np.array([k for _, k in flags])
    points = []
    for t in thresholds:
        keep = scores >= t
        tp = int(np.count_nonzero(keep & (kinds == "tp")))
        fp = int(np.count_nonzero(keep & (kinds == "fp")))
        points.append((fp / n_images, (total_gts - tp) / total_gts))
    points.sort(key=lambda p: (p[0], p[1]))
    return EvalCurve(points=points)


def log_avg_miss_rate(curve: EvalCurve) -> float:
    """Geometric mean of the miss rate at nine log-spaced FPPI references.

    Each reference reads the curve point with the largest fppi at or below
    it (1.0 when none); miss rates clamp to 1e-6 before the log.  The
    result is a percentage.
    """
    if not curve.points:
        raise UsageError("empty curve")
    logs = []
    for ref in MR2_REFS:
        mr = 1.0
        for fppi, miss in curve.points:
            if fppi <= ref:
                mr = miss
            else:
                break
        logs.append(math.log(max(mr, MISS_RATE_FLOOR)))
    return math.exp(sum(logs) / len(logs)) * 100.0


# ---------------------------------------------------------------------------
# Interchange files
# ---------------------------------------------------------------------------

def save_detections(path, dets) -> None:
    """JSON lines: {image_id, x1, y1, x2, y2, score}."""
    with open(path, "w", encoding="utf-8") as f:
        for d in dets:
            f.write(json.dumps({
                "image_id": d.image_id,
                "x1": d.box.x1, "y1": d.box.y1,
                "x2": d.box.x2, "y2": d.box.y2,
                "score": d.score,
            }) + "\n")


def load_detections(path) -> list[Detection]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            r = json.loads(line)
            out.append(Detection(r["image_id"],
                                 Box(r["x1"], r["y1"], r["x2"], r["y2"]),
                                 r["score"]))
    return out


def write_curve_csv(path, curve: EvalCurve, subset_name: str = "") -> None:
    """CSV of (fppi, miss_rate) rows plus a one-line MR_-2 summary."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("fppi,miss_rate\n")
        for fppi, mr in curve.points:
            f.write(f"{fppi!r},{mr!r}\n")
        if curve.mr2 is not None:
            f.write(f"# subset={subset_name} MR-2={curve.mr2:.4f}%\n")
