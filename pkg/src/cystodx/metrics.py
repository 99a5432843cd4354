"""Evaluation mathematics: classification metrics and curves, segmentation
overlap and boundary metrics, and the label-permutation significance test."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value (e.g. AUC with one class)."""


@dataclass
class PermutationResult:
    observed: float
    p_value: float
    n_perms: int
    seed: int


@dataclass
class MetricReport:
    task: str
    scalars: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)  # name -> (N, 2) point arrays
    per_class: dict = field(default_factory=dict)
    per_image: list = field(default_factory=list)
    permutation: Optional[PermutationResult] = None
    flags: list = field(default_factory=list)


def _check_binary(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty label array")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary 0/1")
    return labels.astype(int)


def confusion_counts(scores, labels, threshold: float = 0.5) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn) with the label rule pred = score >= threshold."""
    scores = np.asarray(scores, dtype=float)
    labels = _check_binary(labels)
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    tn = int(np.sum(~pred & (labels == 0)))
    return tp, fp, fn, tn


def classification_metrics(scores, labels, threshold: float = 0.5) -> MetricReport:
    """Threshold-based rates from the confusion matrix, plus ROC/PR curves and AUC."""
    scores = np.asarray(scores, dtype=float)
    labels = _check_binary(labels)
    tp, fp, fn, tn = confusion_counts(scores, labels, threshold)
    n = tp + fp + fn + tn

    report = MetricReport(task="classify")
    s = report.scalars
    s["accuracy"] = (tp + tn) / n
    s["threshold"] = threshold

    def rate(num, den, name):
        if den == 0:
            report.flags.append(f"{name} undefined (zero denominator)")
            return float("nan")
        return num / den

    s["precision"] = rate(tp, tp + fp, "precision")
    s["recall"] = rate(tp, tp + fn, "recall")
    s["sensitivity"] = s["recall"]
    s["specificity"] = rate(tn, tn + fp, "specificity")
    pr_sum = (0.0 if np.isnan(s["precision"]) else s["precision"]) + (
        0.0 if np.isnan(s["recall"]) else s["recall"]
    )
    if np.isnan(s["precision"]) or np.isnan(s["recall"]) or pr_sum == 0:
        s["f1"] = float("nan")
        report.flags.append("f1 undefined")
    else:
        s["f1"] = 2 * s["precision"] * s["recall"] / pr_sum

    if 0 < labels.sum() < labels.size:
        s["auc"] = roc_auc(scores, labels)
        report.curves["roc"] = roc_curve(scores, labels)
        report.curves["pr"] = pr_curve(scores, labels)
    else:
        report.flags.append("auc undefined (single-class labels)")
    return report


def roc_auc(scores, labels) -> float:
    """Rank-based AUC: P(random positive outscores random negative), ties counted 1/2."""
    scores = np.asarray(scores, dtype=float)
    labels = _check_binary(labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks handle ties exactly
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_curve(scores, labels) -> np.ndarray:
    """(fpr, tpr) points at every distinct score threshold, descending."""
    scores = np.asarray(scores, dtype=float)
    labels = _check_binary(labels)
    n_pos, n_neg = int(labels.sum()), int((1 - labels).sum())
    pts = [(0.0, 0.0)]
    for t in np.unique(scores)[::-1]:
        pred = scores >= t
        tpr = np.sum(pred & (labels == 1)) / n_pos if n_pos else 0.0
        fpr = np.sum(pred & (labels == 0)) / n_neg if n_neg else 0.0
        pts.append((fpr, tpr))
    pts.append((1.0, 1.0))
    return np.asarray(pts)


def pr_curve(scores, labels) -> np.ndarray:
    """(recall, precision) points at every distinct score threshold, descending."""
    scores = np.asarray(scores, dtype=float)
    labels = _check_binary(labels)
    n_pos = int(labels.sum())
    pts = []
    for t in np.unique(scores)[::-1]:
        tp, fp, fn, _ = confusion_counts(scores, labels, t)
        precision = tp / (tp + fp) if tp + fp else 1.0
        recall = tp / n_pos if n_pos else 0.0
        pts.append((recall, precision))
    return np.asarray(pts)


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------

def seg_metrics(pred_mask: np.ndarray, true_mask: np.ndarray) -> MetricReport:
    """Dice / IoU / sensitivity / specificity for one mask pair."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    true_mask = np.asarray(true_mask, dtype=bool)
    if pred_mask.shape != true_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {true_mask.shape}")

    inter = int(np.sum(pred_mask & true_mask))
    p, t = int(pred_mask.sum()), int(true_mask.sum())
    union = p + t - inter
    tn = pred_mask.size - union

    report = MetricReport(task="segment")
    s = report.scalars
    if p == 0 and t == 0:
        s["dice"], s["iou"] = 1.0, 1.0
        report.flags.append("both masks empty; Dice/IoU vacuously 1")
    else:
        s["dice"] = 2.0 * inter / (p + t)
        s["iou"] = inter / union
    if t == 0:
        s["sensitivity"] = float("nan")
        report.flags.append("sensitivity undefined (empty true mask)")
    else:
        s["sensitivity"] = inter / t
    if tn + (p - inter) == 0:
        s["specificity"] = float("nan")
        report.flags.append("specificity undefined (no background)")
    else:
        s["specificity"] = tn / (tn + (p - inter))
    return report


def seg_metrics_dataset(pred_masks: Sequence[np.ndarray], true_masks: Sequence[np.ndarray]) -> MetricReport:
    """Per-image metrics averaged over images, plus global-pooled variants.

    The two aggregations are reported side by side ('dice' is mean-of-images,
    'dice_global' pools pixels) because they genuinely differ on mixed corpora.
    """
    if len(pred_masks) != len(true_masks) or len(pred_masks) == 0:
        raise ValueError("need equal non-zero numbers of predicted and true masks")
    report = MetricReport(task="segment")
    names = ("dice", "iou", "sensitivity", "specificity")
    acc = {n: [] for n in names}
    tot_inter = tot_p = tot_t = 0
    for pm, tm in zip(pred_masks, true_masks):
        one = seg_metrics(pm, tm)
        report.per_image.append(one.scalars)
        for n in names:
            acc[n].append(one.scalars[n])
        pm, tm = np.asarray(pm, bool), np.asarray(tm, bool)
        tot_inter += int(np.sum(pm & tm))
        tot_p += int(pm.sum())
        tot_t += int(tm.sum())
    for n in names:
        vals = np.asarray(acc[n], dtype=float)
        report.scalars[n] = float(np.nanmean(vals))
    if tot_p + tot_t > 0:
        report.scalars["dice_global"] = 2.0 * tot_inter / (tot_p + tot_t)
        report.scalars["iou_global"] = tot_inter / (tot_p + tot_t - tot_inter)
    return report


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """(N, 2) array of (row, col) for true pixels with any false 4-neighbor.

    Pixels on the image border count as boundary (outside is background).
    """
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(mask & ~interior)


def boundary_error(pred_mask: np.ndarray, true_mask: np.ndarray) -> float:
    """Mean symmetric Euclidean distance between the two boundary pixel sets."""
    bp = boundary_pixels(pred_mask)
    bt = boundary_pixels(true_mask)
    if len(bp) == 0 or len(bt) == 0:
        raise UndefinedMetricError("boundary error undefined for an empty mask")
    d_pt, _ = cKDTree(bt.astype(float)).query(bp.astype(float))
    d_tp, _ = cKDTree(bp.astype(float)).query(bt.astype(float))
    return float((d_pt.mean() + d_tp.mean()) / 2.0)


# ---------------------------------------------------------------------------
# permutation test
# ---------------------------------------------------------------------------

def permutation_test(scores, labels, n: int = 1000, seed: int = 0) -> PermutationResult:
    """Label-shuffle significance test with the add-one convention:
    p = (1 + #{permuted AUC >= observed}) / (n + 1)."""
    if n < 1:
        raise ValueError("need at least one permutation")
    scores = np.asarray(scores, dtype=float)
    labels = _check_binary(labels)
    observed = roc_auc(scores, labels)

    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    ranks = rankdata(scores)
    rng = np.random.default_rng(seed)
    base = n_pos * (n_pos + 1) / 2.0
    denom = n_pos * n_neg
    count = 0
    for _ in range(n):
        perm = rng.permutation(labels.size)[:n_pos]
        auc = (float(ranks[perm].sum()) - base) / denom
        if auc >= observed:
            count += 1
    p = (1 + count) / (n + 1)
    return PermutationResult(observed=observed, p_value=p, n_perms=n, seed=seed)
