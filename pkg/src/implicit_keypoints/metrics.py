"""Point-set and labeling metrics for keypoint predictions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .geometry import KeypointSet

DEFAULT_THRESHOLDS = tuple(round(0.01 * i, 2) for i in range(11))
TOPK = (1, 3, 5)


class MetricError(ValueError):
    pass


def _pts(s) -> np.ndarray:
    arr = s.points if isinstance(s, KeypointSet) else np.asarray(s, dtype=np.float64)
    return arr.reshape(-1, 3)


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # coordinate-by-coordinate so results equal a scalar dx*dx + dy*dy + dz*dz
    dx = a[:, None, 0] - b[None, :, 0]
    dy = a[:, None, 1] - b[None, :, 1]
    dz = a[:, None, 2] - b[None, :, 2]
    return dx * dx + dy * dy + dz * dz


def _nonempty(a: np.ndarray, b: np.ndarray) -> None:
    if len(a) == 0 or len(b) == 0:
        raise MetricError("empty point set")


def bhd(s1, s2) -> float:
    """Mean of the two directed Hausdorff distances."""
    a, b = _pts(s1), _pts(s2)
    _nonempty(a, b)
    d = np.sqrt(squared_distances(a, b))
    return 0.5 * (float(d.min(axis=1).max()) + float(d.min(axis=0).max()))


def cd(s1, s2) -> float:
    """Chamfer distance with squared norms, each direction averaged."""
    a, b = _pts(s1), _pts(s2)
    _nonempty(a, b)
    d2 = squared_distances(a, b)
    return math.fsum(d2.min(axis=1)) / len(a) + math.fsum(d2.min(axis=0)) / len(b)


def greedy_matches(pred: np.ndarray, gt: np.ndarray, t: float) -> list[tuple[int, int]]:
    """One-to-one pairs within ``t``, taken in ascending distance order."""
    if len(pred) == 0 or len(gt) == 0:
        return []
    d = np.sqrt(squared_distances(pred, gt))
    i, j = np.nonzero(d <= t)
    order = np.lexsort((j, i, d[i, j]))
    used_p, used_g, pairs = set(), set(), []
    for k in order:
        if i[k] not in used_p and j[k] not in used_g:
            used_p.add(i[k])
            used_g.add(j[k])
            pairs.append((int(i[k]), int(j[k])))
    return pairs


def iou_at(pred, gt, t: float, one_to_one: bool = True) -> float:
    p, g = _pts(pred), _pts(gt)
    if len(p) == 0 and len(g) == 0:
        return 1.0
    if one_to_one:
        tp = len(greedy_matches(p, g, t))
        return tp / (len(p) + len(g) - tp)
    if len(p) == 0 or len(g) == 0:
        return 0.0
    near = np.sqrt(squared_distances(p, g)) <= t
    tp = int(near.any(axis=1).sum())
    fn = int((~near.any(axis=0)).sum())
    return tp / (len(p) + fn)


def miou_curve(pred, gt, thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
               one_to_one: bool = True) -> list[tuple[float, float]]:
    """IoU of matched keypoints at each distance threshold (per shape).

    With ``one_to_one`` (default) predictions and ground truth are paired
    greedily by ascending distance and ``IoU = TP / (|pred| + |gt| - TP)``.
    Otherwise a prediction counts as a hit when any ground-truth point lies
    within the threshold and ``IoU = TP / (|pred| + FN)``.
    """
    ts = [float(t) for t in thresholds]
    if not ts:
        raise MetricError("no thresholds given")
    if any(t < 0 for t in ts) or any(b < a for a, b in zip(ts, ts[1:])):
        raise MetricError("thresholds must be nonnegative and ascending")
    return [(t, iou_at(pred, gt, t, one_to_one)) for t in ts]


def mean_curve(curves: list[list[tuple[float, float]]]) -> list[tuple[float, float]]:
    if not curves:
        return []
    return [(t, math.fsum(c[i][1] for c in curves) / len(curves)) for i, (t, _) in enumerate(curves[0])]


def topk_accuracy(scores, gt_labels, ks: Iterable[int] = TOPK) -> dict[int, float]:
    """Fraction of keypoints whose label is among the ``k`` smallest channels.

    Ties rank the lower channel first, matching ``label_of``.
    """
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    if len(s) != len(labels):
        raise MetricError("one score vector per label required")
    if len(labels) == 0:
        raise MetricError("no keypoints to score")
    n_ch = s.shape[1]
    if labels.min() < 0 or labels.max() >= n_ch:
        raise MetricError("label out of range")
    own = s[np.arange(len(s)), labels][:, None]
    idx = np.arange(n_ch)[None, :]
    rank = ((s < own) | ((s == own) & (idx < labels[:, None]))).sum(axis=1)
    return {int(k): float(np.mean(rank < k)) for k in ks}


@dataclass
class ShapeScore:
    model_id: str
    category: str
    bhd: float
    cd: float
    n_pred: int
    n_gt: int
    miou: list = field(default_factory=list)
    topk: Optional[dict] = None


@dataclass
class MetricReport:
    bhd: float
    cd: float
    per_category: dict
    miou_curve: list
    topk: dict
    shapes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "bhd": self.bhd,
            "cd": self.cd,
            "per_category": {k: {"bhd": v[0], "cd": v[1]} for k, v in sorted(self.per_category.items())},
            "miou_curve": [{"threshold": t, "miou": m} for t, m in self.miou_curve],
            "topk": {str(k): v for k, v in sorted(self.topk.items())},
            "shapes": [
                {"model_id": s.model_id, "category": s.category, "bhd": s.bhd, "cd": s.cd,
                 "n_pred": s.n_pred, "n_gt": s.n_gt}
                for s in self.shapes
            ],
        }

    def to_text(self) -> str:
        lines = ["Average BHD and CD", f"{'category':<16}{'BHD':>16}{'CD':>16}"]
        for cat, (b, c) in sorted(self.per_category.items()):
            lines.append(f"{cat:<16}{b:>16.10g}{c:>16.10g}")
        lines.append(f"{'mean':<16}{self.bhd:>16.10g}{self.cd:>16.10g}")
        if self.miou_curve:
            lines += ["", "mIoU vs distance threshold", f"{'threshold':<16}{'mIoU':>16}"]
            lines += [f"{t:<16.10g}{m:>16.10g}" for t, m in self.miou_curve]
        if self.topk:
            lines += ["", "Top-k label accuracy"]
            lines += [f"{'Top-' + str(k):<16}{v:>16.10g}" for k, v in sorted(self.topk.items())]
        return "\n".join(lines) + "\n"


def build_report(scores: list[ShapeScore], topk_parts: Optional[list] = None) -> MetricReport:
    """Aggregate per-shape scores; ``topk_parts`` holds ``(scores, labels)`` per shape."""
    if not scores:
        raise MetricError("no shapes to report")
    cats: dict[str, list[ShapeScore]] = {}
    for s in scores:
        cats.setdefault(s.category, []).append(s)
    per_cat = {
        c: (math.fsum(x.bhd for x in v) / len(v), math.fsum(x.cd for x in v) / len(v))
        for c, v in cats.items()
    }
    topk: dict = {}
    if topk_parts:
        all_scores = np.vstack([p[0] for p in topk_parts])
        all_labels = np.concatenate([p[1] for p in topk_parts])
        topk = topk_accuracy(all_scores, all_labels)
    return MetricReport(
        bhd=math.fsum(s.bhd for s in scores) / len(scores),
        cd=math.fsum(s.cd for s in scores) / len(scores),
        per_category=per_cat,
        miou_curve=mean_curve([s.miou for s in scores if s.miou]),
        topk=topk,
        shapes=list(scores),
    )


def score_shape(model_id: str, category: str, pred: KeypointSet, gt: KeypointSet,
                thresholds=DEFAULT_THRESHOLDS, one_to_one: bool = True) -> ShapeScore:
    """BHD/CD are infinite when the prediction is empty; the curve still counts misses."""
    if len(pred) == 0:
        b = c = float("inf")
    else:
        b, c = bhd(pred, gt), cd(pred, gt)
    curve = miou_curve(pred, gt, thresholds, one_to_one)
    return ShapeScore(model_id, category, b, c, len(pred), len(gt), curve)
