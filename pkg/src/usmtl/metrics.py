"""Evaluation metrics and normalized task-score aggregation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, stats

from .heads import Family
from .losses import iou

# Metric names per family, in report order.
FAMILY_METRICS = {
    Family.SEGMENTATION: ("DSC", "HD"),
    Family.DETECTION: ("IoU",),
    Family.CLASSIFICATION: ("AUC", "F1", "MCC"),
    Family.REGRESSION: ("MRE",),
}


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


def _check_masks(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice(pred_mask, gt_mask, num_classes: int) -> float:
    """Mean over foreground classes of 2|P&G|/(|P|+|G|); a class empty in both scores 1."""
    pred, gt = _check_masks(pred_mask, gt_mask)
    scores = []
    for c in range(1, num_classes):
        p, g = pred == c, gt == c
        denom = int(p.sum()) + int(g.sum())
        scores.append(1.0 if denom == 0 else 2.0 * int((p & g).sum()) / denom)
    return float(np.mean(scores))


def _directed_sq(a: np.ndarray, b: np.ndarray) -> int:
    """max over pixels in a of the squared distance to the nearest pixel of b."""
    _, idx = ndimage.distance_transform_edt(~b, return_indices=True)
    ys, xs = np.nonzero(a)
    dy = ys - idx[0][ys, xs]
    dx = xs - idx[1][ys, xs]
    return int(np.max(dy * dy + dx * dx))


def hausdorff_set(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Hausdorff distance between two boolean pixel sets."""
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        h, w = a.shape
        return math.sqrt(h * h + w * w)
    return math.sqrt(max(_directed_sq(a, b), _directed_sq(b, a)))


def hausdorff(pred_mask, gt_mask, num_classes: int) -> float:
    """Mean over foreground classes of the full-set symmetric Hausdorff distance in pixels."""
    pred, gt = _check_masks(pred_mask, gt_mask)
    return float(np.mean([hausdorff_set(pred == c, gt == c) for c in range(1, num_classes)]))


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


def binary_auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores get half credit."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    ranks = stats.rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(scores, labels) -> float:
    """Binary AUC, or macro one-vs-rest over the classes present in ``labels``.

    ``scores`` is N (positive-class score), N x 2, or N x K probabilities.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise ValueError("AUC needs at least one sample")
    if scores.ndim == 1:
        return binary_auc(scores, labels == 1)
    if scores.shape[1] == 2:
        return binary_auc(scores[:, 1], labels == 1)
    present = np.unique(labels)
    if present.size < 2:
        raise ValueError("AUC undefined: labels contain a single class")
    return float(np.mean([binary_auc(scores[:, c], labels == c) for c in present]))


def confusion_matrix(pred_labels, gt_labels, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns predictions."""
    pred = np.asarray(pred_labels, dtype=int)
    gt = np.asarray(gt_labels, dtype=int)
    if pred.shape != gt.shape:
        raise ValueError(f"label arrays differ in shape: {pred.shape} vs {gt.shape}")
    for arr in (pred, gt):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"labels must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (gt, pred), 1)
    return cm


def f1_mcc(pred_labels, gt_labels, num_classes: int) -> tuple[float, float]:
    """Macro F1 over all classes and the multiclass Matthews correlation coefficient."""
    cm = confusion_matrix(pred_labels, gt_labels, num_classes).astype(np.float64)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    per_class = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    f1 = float(per_class.mean())

    s = cm.sum()
    c = tp.sum()
    p_k = cm.sum(axis=0)
    t_k = cm.sum(axis=1)
    cov = c * s - float(p_k @ t_k)
    den = math.sqrt((s * s - float(p_k @ p_k)) * (s * s - float(t_k @ t_k)))
    mcc = 0.0 if den == 0 else cov / den
    return f1, float(mcc)


# ---------------------------------------------------------------------------
# regression / detection
# ---------------------------------------------------------------------------


def mre(pred_coords, gt_coords, orig_size) -> float:
    """Mean radial error in original-resolution pixels; coords are interleaved normalized (x, y)."""
    pred = np.asarray(pred_coords, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt_coords, dtype=np.float64).reshape(-1)
    if pred.size != gt.size or pred.size % 2:
        raise ValueError(f"landmark counts differ: {pred.size} vs {gt.size} values")
    w, h = orig_size
    d = (pred - gt).reshape(-1, 2) * np.array([w, h], dtype=np.float64)
    return float(np.mean(np.sqrt((d * d).sum(axis=1))))


def box_iou(box_a, box_b) -> float:
    return iou(box_a, box_b)


# ---------------------------------------------------------------------------
# normalization and scoring
# ---------------------------------------------------------------------------


@dataclass
class MetricNorm:
    direction: str = "identity"  # identity | higher | lower
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self):
        if self.direction not in ("identity", "higher", "lower"):
            raise ValueError(f"unknown normalization direction {self.direction!r}")
        if self.direction != "identity":
            if self.lo is None or self.hi is None:
                raise ValueError(f"{self.direction}-better normalization needs lo and hi")
            if self.lo == self.hi:
                raise ValueError(f"normalization bounds must differ (lo == hi == {self.lo})")

    def __call__(self, x: float) -> float:
        if self.direction == "identity":
            return float(x)
        span = self.hi - self.lo
        v = (x - self.lo) / span if self.direction == "higher" else (self.hi - x) / span
        return float(min(1.0, max(0.0, v)))

    def to_dict(self):
        d = {"direction": self.direction}
        if self.direction != "identity":
            d.update(lo=self.lo, hi=self.hi)
        return d


DEFAULT_NORMS = {
    "DSC": MetricNorm(),
    "IoU": MetricNorm(),
    "AUC": MetricNorm(),
    "F1": MetricNorm(),
    "MCC": MetricNorm("higher", -1.0, 1.0),
}


@dataclass
class Normalizer:
    """Per-metric maps to [0, 1], with optional per-task overrides.

    HD and MRE have no default and must be configured.
    """

    metrics: dict[str, MetricNorm] = field(default_factory=lambda: dict(DEFAULT_NORMS))
    tasks: dict[str, dict[str, MetricNorm]] = field(default_factory=dict)

    def get(self, task_id: str, metric: str) -> MetricNorm:
        if metric in self.tasks.get(task_id, {}):
            return self.tasks[task_id][metric]
        if metric in self.metrics:
            return self.metrics[metric]
        raise KeyError(f"no normalization configured for metric {metric!r} (task {task_id})")

    @classmethod
    def identity(cls) -> "Normalizer":
        names = {m for ms in FAMILY_METRICS.values() for m in ms}
        return cls({m: MetricNorm() for m in names})

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        metrics = dict(DEFAULT_NORMS)
        metrics.update({k: MetricNorm(**v) for k, v in d.get("metrics", {}).items()})
        tasks = {t: {k: MetricNorm(**v) for k, v in ms.items()} for t, ms in d.get("tasks", {}).items()}
        return cls(metrics, tasks)

    @classmethod
    def read(cls, path) -> "Normalizer":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return {
            "metrics": {k: v.to_dict() for k, v in self.metrics.items()},
            "tasks": {t: {k: v.to_dict() for k, v in ms.items()} for t, ms in self.tasks.items()},
        }


@dataclass
class SubtaskResult:
    task_id: str
    family: Family
    raw: dict[str, float]
    norm: dict[str, float] = field(default_factory=dict)
    task_score: float | None = None

    def to_dict(self):
        return {"id": self.task_id, "family": self.family.value, "raw": self.raw, "norm": self.norm,
                "task_score": self.task_score}


@dataclass
class MetricReport:
    subtasks: list[SubtaskResult]
    categories: dict[str, float] = field(default_factory=dict)
    overall: float | None = None

    def to_dict(self) -> dict:
        ordered = sorted(self.subtasks, key=lambda s: s.task_id)
        return {"subtasks": [s.to_dict() for s in ordered], "categories": self.categories, "overall": self.overall}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def normalize_and_score(report: MetricReport, norm: Normalizer) -> MetricReport:
    """Normalize each raw metric, average into task scores, then category and overall means."""
    subtasks = []
    by_category: dict[str, list[float]] = {}
    for st in report.subtasks:
        normed = {m: norm.get(st.task_id, m)(v) for m, v in st.raw.items()}
        score = float(np.mean(list(normed.values())))
        subtasks.append(SubtaskResult(st.task_id, st.family, dict(st.raw), normed, score))
        by_category.setdefault(st.family.value, []).append(score)
    categories = {k: float(np.mean(v)) for k, v in sorted(by_category.items())}
    overall = float(np.mean(list(categories.values()))) if categories else None
    return MetricReport(subtasks, categories, overall)
