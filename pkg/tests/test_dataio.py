import numpy as np
import pytest
from shapely.geometry import Point
from shapely.geometry import Polygon as ShapelyPolygon

from cystodx.dataio import (
    REFERENCE_MEAN,
    DatasetManifest,
    FloatImage,
    ImageRecord,
    ManifestError,
    PolygonAnnotation,
    denormalize,
    kfold_patient,
    load_manifest,
    patient_split,
    polygon_to_mask,
    preprocess,
    save_manifest,
)

from conftest import make_manifest_dicts


# ---------------------------------------------------------------------------
# manifest loading
# ---------------------------------------------------------------------------

def test_load_manifest_round_trip(manifest_file, tmp_path):
    path = manifest_file(make_manifest_dicts(10))
    m = load_manifest(path)
    assert len(m) == 10
    out = tmp_path / "copy.json"
    save_manifest(m, out)
    assert len(load_manifest(out)) == 10


def test_duplicate_id_names_offender(manifest_file):
    records = make_manifest_dicts(6)
    records[4]["id"] = "img_3"
    with pytest.raises(ManifestError, match="img_3"):
        load_manifest(manifest_file(records))


def test_mask_without_tumor_label_rejected(manifest_file):
    records = make_manifest_dicts(4)
    records[0]["mask_path"] = "masks/img_0.png"  # tumor_label is 0
    with pytest.raises(ManifestError, match="mask"):
        load_manifest(manifest_file(records))


def test_missing_file_raises():
    with pytest.raises(FileNotFoundError):
        load_manifest("/nonexistent/manifest.json")


def test_patient_spanning_splits_rejected(manifest_file):
    records = make_manifest_dicts(4, n_patients=2)
    records[0]["split"] = "train"
    records[2]["split"] = "val"  # same patient p0
    with pytest.raises(ManifestError, match="spans"):
        load_manifest(manifest_file(records))


def test_image_record_invariants():
    with pytest.raises(ValueError, match="smaller"):
        ImageRecord("a", "p", np.zeros((32, 100, 3), np.uint8))
    with pytest.raises(ValueError, match="HxWx3"):
        ImageRecord("a", "p", np.zeros((64, 64), np.uint8))
    with pytest.raises(ValueError, match="outside"):
        ImageRecord("a", "p", np.full((64, 64, 3), 300.0))


# ---------------------------------------------------------------------------
# polygon rasterization
# ---------------------------------------------------------------------------

def shapely_oracle(points, height, width):
    """Independent point-in-polygon check: pixel center covered by the polygon."""
    poly = ShapelyPolygon(points)
    out = np.zeros((height, width), dtype=bool)
    for y in range(height):
        for x in range(width):
            out[y, x] = poly.covers(Point(x, y))
    return out


def test_square_inclusive_fill():
    sq = PolygonAnnotation(np.array([[10, 10], [20, 10], [20, 20], [10, 20]], float))
    mask = polygon_to_mask([sq], 32, 32)
    assert int(mask.sum()) == 121  # 11 x 11 inclusive
    assert np.array_equal(mask, shapely_oracle(sq.points, 32, 32))


def test_empty_polygon_list():
    assert not polygon_to_mask([], 16, 16).any()


def test_disjoint_squares_union_counts():
    a = PolygonAnnotation(np.array([[1, 1], [5, 1], [5, 5], [1, 5]], float))
    b = PolygonAnnotation(np.array([[10, 10], [14, 10], [14, 14], [10, 14]], float))
    both = polygon_to_mask([a, b], 20, 20)
    na = int(polygon_to_mask([a], 20, 20).sum())
    nb = int(polygon_to_mask([b], 20, 20).sum())
    assert int(both.sum()) == na + nb


def test_degenerate_polygon_skipped_with_warning():
    line = PolygonAnnotation(np.array([[1, 1], [5, 5], [9, 9]], float))
    with pytest.warns(UserWarning, match="degenerate"):
        mask = polygon_to_mask([line], 16, 16)
    assert not mask.any()


def _random_simple_polygon(rng, side):
    """Star-shaped polygon: random radii at sorted angles around a center."""
    n = int(rng.integers(3, 9))
    cx, cy = rng.uniform(side * 0.25, side * 0.75, 2)
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    radii = rng.uniform(side * 0.05, side * 0.45, n)
    pts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
    return np.clip(pts, 0, side - 1)


def test_rasterizer_matches_oracle_on_random_polygons(rng):
    agree = 0
    for _ in range(100):
        pts = _random_simple_polygon(rng, 64)
        poly = PolygonAnnotation(pts)
        if poly.area() <= 0:
            continue
        mine = polygon_to_mask([poly], 64, 64)
        assert np.array_equal(mine, shapely_oracle(pts, 64, 64))
        agree += 1
    assert agree >= 95  # nearly all random draws are non-degenerate


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def bilinear_reference(img, oh, ow):
    """Brute-force half-pixel-center bilinear resize."""
    ih, iw = img.shape[:2]
    out = np.zeros((oh, ow) + img.shape[2:], np.float64)
    for oy in range(oh):
        sy = (oy + 0.5) * ih / oh - 0.5
        y0 = int(np.floor(sy))
        fy = sy - y0
        y0c, y1c = min(max(y0, 0), ih - 1), min(max(y0 + 1, 0), ih - 1)
        for ox in range(ow):
            sx = (ox + 0.5) * iw / ow - 0.5
            x0 = int(np.floor(sx))
            fx = sx - x0
            x0c, x1c = min(max(x0, 0), iw - 1), min(max(x0 + 1, 0), iw - 1)
            out[oy, ox] = (1 - fy) * ((1 - fx) * img[y0c, x0c] + fx * img[y0c, x1c]) + fy * (
                (1 - fx) * img[y1c, x0c] + fx * img[y1c, x1c]
            )
    return out


def test_constant_reference_mean_maps_to_zero():
    pixels = np.ones((64, 64, 3), np.float64) * (REFERENCE_MEAN * 255.0)
    rec = ImageRecord("c", "p", pixels)
    out = preprocess(rec, side=64)
    assert np.abs(out.tensor).max() < 1e-5


def test_identity_resize_at_native_side(rng):
    pixels = rng.integers(0, 256, (512, 512, 3)).astype(np.uint8)
    rec = ImageRecord("i", "p", pixels)
    out = preprocess(rec, side=512, normalize="raw01")
    assert np.array_equal(out.tensor, (pixels.astype(np.float32) / 255.0).transpose(2, 0, 1))


def test_upsample_matches_bilinear_reference_and_preserves_mean(rng):
    # checkerboard with noise, 64 -> 128
    base = np.indices((64, 64)).sum(axis=0) % 2
    pixels = (np.stack([base] * 3, axis=-1) * 200 + rng.integers(0, 55, (64, 64, 3))).astype(
        np.uint8
    )
    rec = ImageRecord("cb", "p", pixels)
    out = preprocess(rec, side=128, normalize="raw01")
    ref = bilinear_reference(pixels.astype(np.float64) / 255.0, 128, 128)
    assert np.abs(out.tensor.transpose(1, 2, 0) - ref).max() < 1e-5
    in_mean = pixels.astype(np.float64).mean() / 255.0
    assert abs(out.tensor.mean() - in_mean) < 1e-3


def test_preprocess_rejects_wrong_channels():
    rec = ImageRecord("x", "p", np.zeros((64, 64, 3), np.uint8))
    bad = ImageRecord.__new__(ImageRecord)  # bypass init to smuggle a 1-channel image
    object.__setattr__(bad, "id", "bad")
    object.__setattr__(bad, "patient_id", "p")
    object.__setattr__(bad, "pixels", np.zeros((64, 64, 1), np.uint8))
    object.__setattr__(bad, "source", "")
    preprocess(rec, side=64)
    with pytest.raises(ValueError, match="3-channel"):
        preprocess(bad, side=64)


def test_preprocess_idempotent_after_denormalize(rng):
    pixels = rng.integers(0, 256, (96, 96, 3)).astype(np.uint8)
    first = preprocess(ImageRecord("a", "p", pixels), side=96)
    back = denormalize(first)
    second = preprocess(ImageRecord("a2", "p", back), side=96)
    assert np.abs(first.tensor - second.tensor).max() < 1e-5


def test_float_image_rejects_nonfinite():
    with pytest.raises(ValueError, match="finite"):
        FloatImage(tensor=np.full((3, 8, 8), np.nan, np.float32))


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def _manifest(n_records, n_patients, **kw):
    from cystodx.dataio import ManifestRecord, SubtypeLabels

    recs = []
    for i in range(n_records):
        recs.append(
            ManifestRecord(
                id=f"img_{i}",
                patient_id=f"p{i % n_patients}",
                image_path=f"images/img_{i}.png",
                tumor_label=i % 2,
                subtype=kw.get("subtype_fn", lambda i: None)(i),
            )
        )
    return DatasetManifest(tuple(recs))


def test_patient_split_10x10_exact():
    m = _manifest(100, 10)
    out = patient_split(m, seed=7)
    by_split = {}
    for rec in out.records:
        by_split.setdefault(rec.split, set()).add(rec.patient_id)
    assert len(by_split["train"]) == 8
    assert len(by_split["val"]) == 1
    assert len(by_split["test"]) == 1
    # brute-force disjointness
    for a in by_split:
        for b in by_split:
            if a != b:
                assert not (by_split[a] & by_split[b])


def test_patient_split_deterministic():
    m = _manifest(60, 12)
    a = patient_split(m, seed=3)
    b = patient_split(m, seed=3)
    assert [r.split for r in a.records] == [r.split for r in b.records]


def test_patient_split_two_patients_errors():
    with pytest.raises(ManifestError, match="3 patients"):
        patient_split(_manifest(10, 2), seed=0)


def test_patient_split_ratio_deviation_bound(rng):
    for trial in range(20):
        n_pat = int(rng.integers(5, 20))
        sizes = rng.integers(1, 12, n_pat)
        recs = []
        k = 0
        for p, s in enumerate(sizes):
            for _ in range(s):
                from cystodx.dataio import ManifestRecord

                recs.append(ManifestRecord(f"i{k}", f"p{p}", f"x{k}.png"))
                k += 1
        m = DatasetManifest(tuple(recs))
        out = patient_split(m, seed=int(rng.integers(1 << 30)))
        total = len(out)
        bound = sizes.max() / total
        counts = {"train": 0, "val": 0, "test": 0}
        for rec in out.records:
            counts[rec.split] += 1
        for name, ratio in zip(("train", "val", "test"), (0.8, 0.1, 0.1)):
            assert abs(counts[name] / total - ratio) <= bound + 1e-12


def test_kfold_partition_property():
    m = _manifest(50, 25)
    folds = kfold_patient(m, k=5, seed=0)
    assert len(folds) == 5
    seen_val_patients = []
    for train_m, val_m in folds:
        train_p = set(train_m.patients())
        val_p = set(val_m.patients())
        assert not (train_p & val_p)  # leakage scan
        seen_val_patients.extend(val_p)
    assert sorted(seen_val_patients) == sorted(m.patients())  # each patient exactly once


def test_kfold_stratification_exact():
    from cystodx.dataio import SubtypeLabels

    m = _manifest(
        40, 40, subtype_fn=lambda i: SubtypeLabels(her2=1 if i < 20 else 0, ki67=None, p53=None)
    )
    folds = kfold_patient(m, k=5, seed=11)
    for _, val_m in folds:
        pos = sum(1 for r in val_m.records if r.subtype.her2 == 1)
        assert pos == 4  # 20 positives / 5 folds exactly


def test_kfold_all_positive_degenerate():
    from cystodx.dataio import SubtypeLabels

    m = _manifest(10, 10, subtype_fn=lambda i: SubtypeLabels(her2=1))
    for _, val_m in kfold_patient(m, k=5, seed=0):
        assert all(r.subtype.her2 == 1 for r in val_m.records)


def test_kfold_too_many_folds_errors():
    with pytest.raises(ManifestError, match="exceeds"):
        kfold_patient(_manifest(4, 4), k=5, seed=0)
