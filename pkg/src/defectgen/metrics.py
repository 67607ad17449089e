"""Threshold-free detection metrics and test-set evaluation.

AUROC uses the rank statistic with ties counted half; AUPR is step-wise
average precision summed over distinct score thresholds.  Both raise
MetricUndefinedError when a class is absent rather than returning a
placeholder.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import MetricUndefinedError, ShapeError


def _check_pair(labels, scores) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels).astype(np.int64).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise ShapeError(f"labels shape {y.shape} != scores shape {s.shape}")
    if y.size == 0:
        raise MetricUndefinedError("no samples")
    if not np.isin(y, (0, 1)).all():
        raise MetricUndefinedError("labels must be binary 0/1")
    if not np.isfinite(s).all():
        raise MetricUndefinedError("scores contain non-finite values")
    return y, s


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks, ties receiving the mean of their positions."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc(labels, scores) -> float:
    """Probability a positive outscores a negative, ties worth half."""
    y, s = _check_pair(labels, scores)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError(
            f"AUROC needs both classes (got {n_pos} positive, {n_neg} negative)"
        )
    ranks = _average_ranks(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _pr_steps(y: np.ndarray, s: np.ndarray):
    """Cumulative tp/fp after each distinct descending threshold."""
    order = np.argsort(-s, kind="mergesort")
    y_sorted = y[order]
    s_sorted = s[order]
    distinct = np.nonzero(np.diff(s_sorted))[0]
    cut = np.r_[distinct, y.size - 1]
    tp = np.cumsum(y_sorted)[cut].astype(np.float64)
    fp = np.cumsum(1 - y_sorted)[cut].astype(np.float64)
    return tp, fp, s_sorted[cut]


def aupr(labels, scores) -> float:
    """Step-wise average precision over distinct thresholds."""
    y, s = _check_pair(labels, scores)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricUndefinedError("AUPR needs at least one positive sample")
    tp, fp, _ = _pr_steps(y, s)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev_recall = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev_recall) * precision))


def roc_points(labels, scores) -> np.ndarray:
    """(threshold, fpr, tpr) rows at distinct thresholds, plus the origin."""
    y, s = _check_pair(labels, scores)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("ROC curve needs both classes")
    tp, fp, thr = _pr_steps(y, s)
    rows = np.column_stack([thr, fp / n_neg, tp / n_pos])
    origin = np.array([[np.inf, 0.0, 0.0]])
    return np.vstack([origin, rows])


def pr_points(labels, scores) -> np.ndarray:
    """(threshold, recall, precision) rows at distinct thresholds."""
    y, s = _check_pair(labels, scores)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricUndefinedError("PR curve needs at least one positive")
    tp, fp, thr = _pr_steps(y, s)
    return np.column_stack([thr, tp / n_pos, tp / (tp + fp)])


@dataclass
class EvalRecord:
    """One test image's labels and scores."""

    category: str
    anomaly_type: str  # "good" for defect-free images
    image_label: int
    image_score: float
    pixel_labels: np.ndarray
    pixel_scores: np.ndarray

    def __post_init__(self):
        self.pixel_labels = np.asarray(self.pixel_labels)
        self.pixel_scores = np.asarray(self.pixel_scores, dtype=np.float64)
        if self.pixel_labels.shape != self.pixel_scores.shape:
            raise ShapeError(
                f"pixel labels {self.pixel_labels.shape} vs scores "
                f"{self.pixel_scores.shape}"
            )


@dataclass
class EvalResult:
    overall: dict
    per_category: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"overall": self.overall, "per_category": self.per_category}


def _group_metrics(records: Sequence[EvalRecord]) -> dict:
    img_y = np.array([r.image_label for r in records])
    img_s = np.array([r.image_score for r in records])
    pix_y = np.concatenate([r.pixel_labels.ravel() for r in records])
    pix_s = np.concatenate([r.pixel_scores.ravel() for r in records])
    out: dict = {"n_images": len(records), "n_defective": int(img_y.sum())}

    def _try(name, fn, *args):
        try:
            out[name] = fn(*args)
        except MetricUndefinedError as exc:
            out[name] = None
            out.setdefault("undefined", {})[name] = str(exc)

    _try("image_auroc", auroc, img_y, img_s)
    _try("image_aupr", aupr, img_y, img_s)
    _try("pixel_auroc", auroc, pix_y, pix_s)
    _try("pixel_aupr", aupr, pix_y, pix_s)
    return out


def evaluate_records(records: Sequence[EvalRecord]) -> EvalResult:
    """Pooled metrics plus a per-category breakdown.

    Pixel metrics pool every pixel of the group; image metrics use one
    score per image.  Categories with a class missing report None for
    the affected metric and say why.
    """
    if not records:
        raise MetricUndefinedError("no evaluation records")
    overall = _group_metrics(records)
    per_category: dict = {}
    for cat in sorted({r.category for r in records}):
        cat_records = [r for r in records if r.category == cat]
        per_category[cat] = _group_metrics(cat_records)
        types = sorted({r.anomaly_type for r in cat_records if r.anomaly_type != "good"})
        goods = [r for r in cat_records if r.anomaly_type == "good"]
        by_type = {}
        for t in types:
            subset = goods + [r for r in cat_records if r.anomaly_type == t]
            by_type[t] = _group_metrics(subset)
        if by_type:
            per_category[cat]["per_anomaly_type"] = by_type
    return EvalResult(overall=overall, per_category=per_category)
