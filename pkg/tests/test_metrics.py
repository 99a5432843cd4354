import numpy as np
import pytest

from cystodx.metrics import (
    MetricReport,
    UndefinedMetricError,
    boundary_error,
    boundary_pixels,
    classification_metrics,
    permutation_test,
    pr_curve,
    roc_auc,
    seg_metrics,
    seg_metrics_dataset,
)


def auc_pair_oracle(scores, labels):
    """O(P*N) pair counting with half-credit ties."""
    scores = np.asarray(scores, float)
    labels = np.asarray(labels, int)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def seg_oracle(pred, true):
    """Explicit pixel enumeration of the confusion sets."""
    tp = fp = fn = tn = 0
    for a, b in zip(pred.ravel(), true.ravel()):
        if a and b:
            tp += 1
        elif a and not b:
            fp += 1
        elif not a and b:
            fn += 1
        else:
            tn += 1
    dice = 2 * tp / (2 * tp + fp + fn) if (tp + fp + fn) else 1.0
    iou = tp / (tp + fp + fn) if (tp + fp + fn) else 1.0
    sens = tp / (tp + fn) if (tp + fn) else float("nan")
    spec = tn / (tn + fp) if (tn + fp) else float("nan")
    return dice, iou, sens, spec


# ---------------------------------------------------------------------------
# classification metrics
# ---------------------------------------------------------------------------

def test_confusion_arithmetic():
    # TP=2, FP=1, FN=1, TN=6
    scores = np.array([0.9, 0.8, 0.7, 0.3, 0.2, 0.2, 0.1, 0.1, 0.1, 0.1])
    labels = np.array([1, 1, 0, 1, 0, 0, 0, 0, 0, 0])
    rep = classification_metrics(scores, labels, threshold=0.5)
    assert rep.scalars["precision"] == pytest.approx(2 / 3)
    assert rep.scalars["recall"] == pytest.approx(2 / 3)
    assert rep.scalars["f1"] == pytest.approx(2 / 3)
    assert rep.scalars["accuracy"] == pytest.approx(0.8)
    assert rep.scalars["specificity"] == pytest.approx(6 / 7)


def test_all_correct_rates_one():
    rep = classification_metrics([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0], 0.5)
    for key in ("accuracy", "precision", "recall", "specificity", "f1", "auc"):
        assert rep.scalars[key] == 1.0


def test_degenerate_threshold():
    rep = classification_metrics([0.9, 0.8, 0.1], [1, 1, 0], threshold=1.0 + 1e-9)
    assert rep.scalars["recall"] == 0.0
    assert rep.scalars["specificity"] == 1.0


def test_empty_input_errors():
    with pytest.raises(ValueError):
        classification_metrics([], [])


def test_single_class_flags_undefined():
    rep = classification_metrics([0.9, 0.8], [1, 1], 0.5)
    assert any("auc" in f for f in rep.flags)
    assert np.isnan(rep.scalars["specificity"])


def test_monotone_transform_invariance():
    rng = np.random.default_rng(3)
    scores = rng.random(40)
    labels = rng.integers(0, 2, 40)
    labels[0], labels[1] = 0, 1
    base = classification_metrics(scores, labels, threshold=0.5)
    warped = classification_metrics(np.exp(3 * scores), labels, threshold=np.exp(3 * 0.5))
    for key in ("accuracy", "precision", "recall", "specificity", "f1", "auc"):
        a, b = base.scalars[key], warped.scalars[key]
        assert (np.isnan(a) and np.isnan(b)) or a == pytest.approx(b, abs=1e-12)


# ---------------------------------------------------------------------------
# AUC and curves
# ---------------------------------------------------------------------------

def test_auc_perfect_separation():
    assert roc_auc([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]) == 1.0


def test_auc_interleaved_hand_value():
    assert roc_auc([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]) == 0.75


def test_auc_antisymmetry():
    rng = np.random.default_rng(5)
    scores = rng.random(30)
    labels = rng.integers(0, 2, 30)
    labels[:2] = [0, 1]
    assert roc_auc(-scores, labels) == pytest.approx(1 - roc_auc(scores, labels), abs=1e-12)


def test_auc_single_class_errors():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.9], [1, 1])


def test_auc_matches_pair_oracle_exactly():
    rng = np.random.default_rng(42)
    for _ in range(100):
        n = int(rng.integers(4, 51))
        # quantized scores force ties
        scores = np.round(rng.random(n), 1)
        labels = rng.integers(0, 2, n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        assert roc_auc(scores, labels) == auc_pair_oracle(scores, labels)


def test_pr_curve_every_distinct_threshold():
    scores = np.array([0.9, 0.8, 0.8, 0.3])
    labels = np.array([1, 0, 1, 0])
    pts = pr_curve(scores, labels)
    assert len(pts) == 3  # distinct scores: 0.9, 0.8, 0.3
    # at t=0.9: tp=1 fp=0 -> precision 1, recall 0.5
    assert pts[0] == pytest.approx((0.5, 1.0))
    # recall is monotone as threshold drops
    assert np.all(np.diff(pts[:, 0]) >= 0)


# ---------------------------------------------------------------------------
# segmentation metrics
# ---------------------------------------------------------------------------

def test_identical_masks():
    m = np.zeros((16, 16), bool)
    m[4:8, 4:8] = True
    rep = seg_metrics(m, m)
    assert rep.scalars["dice"] == 1.0
    assert rep.scalars["iou"] == 1.0


def test_half_overlap_hand_value():
    p = np.zeros((8, 8), bool)
    t = np.zeros((8, 8), bool)
    p[0, 0:4] = True
    t[0, 2:6] = True  # |P|=|T|=4, overlap 2
    rep = seg_metrics(p, t)
    assert rep.scalars["dice"] == pytest.approx(0.5)
    assert rep.scalars["iou"] == pytest.approx(1 / 3)


def test_both_empty_vacuous():
    z = np.zeros((8, 8), bool)
    rep = seg_metrics(z, z)
    assert rep.scalars["dice"] == 1.0
    assert rep.scalars["iou"] == 1.0
    assert rep.flags


def test_iou_dice_identity_per_image():
    rng = np.random.default_rng(7)
    for _ in range(50):
        p = rng.random((12, 12)) > 0.5
        t = rng.random((12, 12)) > 0.5
        rep = seg_metrics(p, t)
        d, i = rep.scalars["dice"], rep.scalars["iou"]
        assert i == pytest.approx(d / (2 - d), abs=1e-12)


def test_seg_matches_pixel_oracle_exactly():
    rng = np.random.default_rng(11)
    for _ in range(50):
        p = rng.random((10, 14)) > rng.random()
        t = rng.random((10, 14)) > rng.random()
        rep = seg_metrics(p, t)
        dice, iou, sens, spec = seg_oracle(p, t)
        assert rep.scalars["dice"] == dice
        assert rep.scalars["iou"] == iou
        assert (np.isnan(sens) and np.isnan(rep.scalars["sensitivity"])) or rep.scalars[
            "sensitivity"
        ] == sens
        assert (np.isnan(spec) and np.isnan(rep.scalars["specificity"])) or rep.scalars[
            "specificity"
        ] == spec


def test_dataset_aggregation_mean_and_global():
    a_p = np.zeros((4, 4), bool); a_p[0, 0] = True
    a_t = np.zeros((4, 4), bool); a_t[0, 0] = True  # dice 1
    b_p = np.zeros((4, 4), bool); b_p[1] = True
    b_t = np.zeros((4, 4), bool); b_t[2] = True  # dice 0
    rep = seg_metrics_dataset([a_p, b_p], [a_t, b_t])
    assert rep.scalars["dice"] == pytest.approx(0.5)  # mean of per-image
    assert rep.scalars["dice_global"] == pytest.approx(2 * 1 / (5 + 5))
    assert len(rep.per_image) == 2


def test_shape_mismatch_errors():
    with pytest.raises(ValueError, match="differ"):
        seg_metrics(np.zeros((4, 4), bool), np.zeros((5, 5), bool))


# ---------------------------------------------------------------------------
# boundary error
# ---------------------------------------------------------------------------

def test_boundary_identical_zero():
    m = np.zeros((20, 20), bool)
    m[5:10, 5:10] = True
    assert boundary_error(m, m) == 0.0


def _boundary_oracle(a, b):
    """Brute-force nearest-neighbor means over the two boundary sets."""
    pa = boundary_pixels(a).astype(float)
    pb = boundary_pixels(b).astype(float)
    d_ab = np.mean([np.sqrt(((pb - q) ** 2).sum(1)).min() for q in pa])
    d_ba = np.mean([np.sqrt(((pa - q) ** 2).sum(1)).min() for q in pb])
    return (d_ab + d_ba) / 2


def test_boundary_translation_approximates_shift():
    # small square so overlapping side edges do not dominate the mean
    a = np.zeros((40, 40), bool)
    b = np.zeros((40, 40), bool)
    a[10:12, 10:12] = True
    b[13:15, 10:12] = True  # shifted 3 px down, far from borders
    be = boundary_error(a, b)
    assert abs(be - 3.0) <= 0.5
    assert be == pytest.approx(_boundary_oracle(a, b), abs=1e-12)


def test_boundary_matches_oracle_on_large_shapes():
    a = np.zeros((40, 40), bool)
    b = np.zeros((40, 40), bool)
    a[10:20, 10:20] = True
    b[13:23, 10:20] = True
    assert boundary_error(a, b) == pytest.approx(_boundary_oracle(a, b), abs=1e-12)
    rng = np.random.default_rng(29)
    for _ in range(10):
        a = rng.random((20, 20)) > 0.5
        b = rng.random((20, 20)) > 0.5
        a[0, 0] = b[0, 1] = True
        assert boundary_error(a, b) == pytest.approx(_boundary_oracle(a, b), abs=1e-12)


def test_boundary_symmetry():
    rng = np.random.default_rng(13)
    a = rng.random((24, 24)) > 0.6
    b = rng.random((24, 24)) > 0.6
    a[0, 0] = b[1, 1] = True  # keep both nonempty
    assert boundary_error(a, b) == pytest.approx(boundary_error(b, a), abs=1e-12)


def test_boundary_empty_mask_undefined():
    m = np.zeros((8, 8), bool)
    full = np.ones((8, 8), bool)
    with pytest.raises(UndefinedMetricError):
        boundary_error(m, full)


def test_boundary_pixels_4_connectivity():
    m = np.zeros((5, 5), bool)
    m[1:4, 1:4] = True
    pix = {tuple(p) for p in boundary_pixels(m)}
    assert (2, 2) not in pix  # interior
    assert (1, 1) in pix and (3, 3) in pix
    assert len(pix) == 8


# ---------------------------------------------------------------------------
# permutation test
# ---------------------------------------------------------------------------

def test_permutation_minimum_p():
    # perfectly separable scores: no permutation should beat the observed AUC
    scores = np.concatenate([np.linspace(0.7, 0.99, 30), np.linspace(0.01, 0.3, 30)])
    labels = np.array([1] * 30 + [0] * 30)
    res = permutation_test(scores, labels, n=1000, seed=0)
    assert res.observed == 1.0
    assert res.p_value == pytest.approx(1 / 1001)


def test_permutation_single_perm_boundary():
    # observed AUC 0.5 with exchangeable scores: permuted >= observed, p = 1
    scores = np.array([0.5, 0.5, 0.5, 0.5])
    labels = np.array([1, 1, 0, 0])
    res = permutation_test(scores, labels, n=1, seed=0)
    assert res.p_value == 1.0


def test_permutation_p_range():
    rng = np.random.default_rng(17)
    for seed in range(5):
        scores = rng.random(30)
        labels = rng.integers(0, 2, 30)
        labels[:2] = [0, 1]
        res = permutation_test(scores, labels, n=200, seed=seed)
        assert 1 / 201 <= res.p_value <= 1.0


def test_permutation_calibration_quick():
    # under the null, p-values are roughly uniform
    rng = np.random.default_rng(23)
    hits = 0
    trials = 40
    for t in range(trials):
        scores = rng.random(60)
        labels = np.array([1] * 30 + [0] * 30)
        rng.shuffle(labels)
        res = permutation_test(scores, labels, n=200, seed=t)
        if res.p_value < 0.05:
            hits += 1
    assert hits / trials < 0.2
