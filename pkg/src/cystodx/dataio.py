"""Dataset ingest: manifests, polygon-to-mask rasterization, preprocessing, patient-level splits."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np

# Channel statistics of the standard large pretraining corpus, used whenever a
# pretrained backbone is in play.
REFERENCE_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
REFERENCE_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

SPLITS = ("train", "val", "test", "unassigned")

MIN_SIDE = 64


class ManifestError(ValueError):
    """Raised when a manifest or one of its records violates an invariant."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SubtypeLabels:
    """Per-marker binary labels; None means the marker status is unknown."""

    her2: Optional[int] = None
    ki67: Optional[int] = None
    p53: Optional[int] = None

    MARKERS = ("her2", "ki67", "p53")

    def __post_init__(self):
        for name in self.MARKERS:
            v = getattr(self, name)
            if v is not None and v not in (0, 1):
                raise ManifestError(f"marker {name} must be 0, 1 or unknown, got {v!r}")

    def values(self) -> tuple[Optional[int], ...]:
        return (self.her2, self.ki67, self.p53)

    def any_known(self) -> bool:
        return any(v is not None for v in self.values())

    def pattern(self) -> str:
        """Concatenated bit-pattern with '?' for unknown, e.g. '1?0'."""
        return "".join("?" if v is None else str(v) for v in self.values())


def subtype_arrays(labels: Sequence[SubtypeLabels]) -> tuple[np.ndarray, np.ndarray]:
    """Stack labels into a (B, 3) float target array and a (B, 3) known-mask."""
    targets = np.zeros((len(labels), 3), dtype=np.float32)
    known = np.zeros((len(labels), 3), dtype=bool)
    for i, lab in enumerate(labels):
        for j, v in enumerate(lab.values()):
            if v is not None:
                targets[i, j] = float(v)
                known[i, j] = True
    return targets, known


@dataclass(frozen=True)
class ImageRecord:
    """A decoded image plus its provenance. Pixels are HxWx3, values in [0, 255].

    uint8 is the normal storage dtype; float arrays are accepted so that
    round-trip pipelines (denormalize -> re-preprocess) stay lossless.
    """

    id: str
    patient_id: str
    pixels: np.ndarray
    source: str = ""

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"record {self.id}: expected HxWx3 pixels, got shape {px.shape}")
        h, w = px.shape[:2]
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ValueError(f"record {self.id}: image {h}x{w} smaller than {MIN_SIDE}px minimum")
        lo, hi = float(px.min()), float(px.max())
        if lo < 0 or hi > 255:
            raise ValueError(f"record {self.id}: pixel values outside [0, 255] ({lo}..{hi})")


@dataclass(frozen=True)
class PolygonAnnotation:
    """Closed polygon in pixel coordinates; points is an (N, 2) array of (x, y)."""

    points: np.ndarray
    label: str = "lesion"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
            raise ValueError(f"polygon needs >= 3 (x, y) points, got shape {pts.shape}")
        object.__setattr__(self, "points", pts)

    def area(self) -> float:
        """Unsigned shoelace area."""
        x, y = self.points[:, 0], self.points[:, 1]
        return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2.0)

    def clamped(self, height: int, width: int) -> "PolygonAnnotation":
        pts = self.points.copy()
        pts[:, 0] = np.clip(pts[:, 0], 0, width - 1)
        pts[:, 1] = np.clip(pts[:, 1], 0, height - 1)
        return PolygonAnnotation(points=pts, label=self.label)


@dataclass(frozen=True)
class FloatImage:
    """Model-ready 3xSxS float tensor with its normalization provenance."""

    tensor: np.ndarray
    norm: str = "reference"

    def __post_init__(self):
        t = self.tensor
        if t.ndim != 3 or t.shape[0] != 3:
            raise ValueError(f"expected 3xSxS tensor, got shape {t.shape}")
        if not np.isfinite(t).all():
            raise ValueError("non-finite values in image tensor")

    @property
    def side(self) -> int:
        return self.tensor.shape[1]


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    patient_id: str
    image_path: str
    tumor_label: Optional[int] = None
    mask_path: Optional[str] = None
    subtype: Optional[SubtypeLabels] = None
    split: str = "unassigned"


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable collection of records; the unit of all data flow."""

    records: tuple[ManifestRecord, ...]
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.records)

    def patients(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.patient_id, None)
        return list(seen)

    def subset(self, split: str) -> "DatasetManifest":
        return DatasetManifest(tuple(r for r in self.records if r.split == split), self.root)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p


# ---------------------------------------------------------------------------
# manifest IO
# ---------------------------------------------------------------------------

def _parse_marker(raw) -> Optional[int]:
    if raw is None or raw == "unknown":
        return None
    if raw in (0, 1):
        return int(raw)
    raise ManifestError(f"marker value must be 0, 1, null or 'unknown', got {raw!r}")


def load_manifest(path) -> DatasetManifest:
    """Load and validate a manifest JSON file (top-level array of records)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path) as f:
        raw = json.load(f)
    if not isinstance(raw, list):
        raise ManifestError("manifest must be a top-level JSON array of records")

    records = []
    for i, item in enumerate(raw):
        try:
            subtype = None
            if any(k in item for k in SubtypeLabels.MARKERS):
                subtype = SubtypeLabels(
                    her2=_parse_marker(item.get("her2")),
                    ki67=_parse_marker(item.get("ki67")),
                    p53=_parse_marker(item.get("p53")),
                )
            rec = ManifestRecord(
                id=str(item["id"]),
                patient_id=str(item["patient_id"]),
                image_path=str(item["image_path"]),
                tumor_label=None if item.get("tumor_label") is None else int(item["tumor_label"]),
                mask_path=item.get("mask_path"),
                subtype=subtype,
                split=item.get("split", "unassigned"),
            )
        except KeyError as e:
            raise ManifestError(f"record #{i}: missing required key {e}") from None
        records.append(rec)

    manifest = DatasetManifest(tuple(records), root=path.parent)
    validate_manifest(manifest)
    return manifest


def validate_manifest(manifest: DatasetManifest) -> None:
    """Enforce manifest invariants; raises ManifestError naming the offender."""
    seen: set[str] = set()
    for rec in manifest.records:
        if rec.id in seen:
            raise ManifestError(f"duplicate record id {rec.id!r}")
        seen.add(rec.id)
        if rec.tumor_label is not None and rec.tumor_label not in (0, 1):
            raise ManifestError(f"record {rec.id!r}: tumor_label must be 0 or 1")
        if rec.mask_path is not None and rec.tumor_label != 1:
            raise ManifestError(
                f"record {rec.id!r}: mask_path set but tumor_label is "
                f"{rec.tumor_label!r} (masks imply tumor_label = 1)"
            )
        if rec.split not in SPLITS:
            raise ManifestError(f"record {rec.id!r}: unknown split {rec.split!r}")

    # split assignment must be a function of patient_id
    per_patient: dict[str, str] = {}
    for rec in manifest.records:
        prev = per_patient.setdefault(rec.patient_id, rec.split)
        if prev != rec.split:
            raise ManifestError(
                f"patient {rec.patient_id!r} spans splits {prev!r} and {rec.split!r}"
            )


def save_manifest(manifest: DatasetManifest, path) -> None:
    out = []
    for r in manifest.records:
        item: dict = {"id": r.id, "patient_id": r.patient_id, "image_path": r.image_path}
        if r.tumor_label is not None:
            item["tumor_label"] = r.tumor_label
        if r.mask_path is not None:
            item["mask_path"] = r.mask_path
        if r.subtype is not None:
            for name, v in zip(SubtypeLabels.MARKERS, r.subtype.values()):
                item[name] = v
        if r.split != "unassigned":
            item["split"] = r.split
        out.append(item)
    with open(path, "w") as f:
        json.dump(out, f, indent=2)


# ---------------------------------------------------------------------------
# images and masks
# ---------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """Decode JPEG/PNG/BMP into an HxWx3 uint8 RGB array."""
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise IOError(f"cannot decode image: {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def decode_image_bytes(data: bytes) -> np.ndarray:
    """Decode an in-memory JPEG/PNG/BMP buffer into HxWx3 uint8 RGB."""
    buf = np.frombuffer(data, dtype=np.uint8)
    img = cv2.imdecode(buf, cv2.IMREAD_COLOR)
    if img is None:
        raise IOError("cannot decode image buffer")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def load_mask(path) -> np.ndarray:
    """Load a single-channel 0/255 PNG into an HxW boolean mask."""
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise IOError(f"cannot decode mask: {path}")
    return raw > 127


def save_mask(mask: np.ndarray, path) -> None:
    cv2.imwrite(str(path), mask.astype(np.uint8) * 255)


def resize_mask(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbor resize; never bilinear, to preserve binarity."""
    out = cv2.resize(mask.astype(np.uint8), (width, height), interpolation=cv2.INTER_NEAREST)
    return out.astype(bool)


def load_labelme(path, clamp_to: Optional[tuple[int, int]] = None) -> list[PolygonAnnotation]:
    """Parse polygon shapes out of a LabelMe JSON file."""
    with open(path) as f:
        doc = json.load(f)
    polys = []
    for i, shape in enumerate(doc.get("shapes", [])):
        if shape.get("shape_type", "polygon") != "polygon":
            continue
        pts = np.asarray(shape["points"], dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 3:
            raise ValueError(f"{path}: shape #{i} has fewer than 3 points")
        poly = PolygonAnnotation(points=pts, label=shape.get("label", "lesion"))
        if clamp_to is not None:
            poly = poly.clamped(*clamp_to)
        polys.append(poly)
    return polys


def _rasterize_polygon(poly: PolygonAnnotation, height: int, width: int) -> np.ndarray:
    """Fill convention: a pixel is inside iff its center (integer grid point)
    is strictly inside by the even-odd rule or lies on a polygon edge."""
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    px, py = xs.ravel(), ys.ravel()
    inside = np.zeros(px.shape, dtype=bool)
    on_edge = np.zeros(px.shape, dtype=bool)

    pts = poly.points
    n = pts.shape[0]
    for i in range(n):
        x1, y1 = pts[i]
        x2, y2 = pts[(i + 1) % n]
        crosses = (y1 <= py) != (y2 <= py)
        if np.any(crosses):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (px < xint)
        # boundary: within 1e-9 px of the segment
        dx, dy = x2 - x1, y2 - y1
        seg_len2 = dx * dx + dy * dy
        if seg_len2 == 0.0:
            on_edge |= (px - x1) ** 2 + (py - y1) ** 2 <= 1e-18
            continue
        cross = dx * (py - y1) - dy * (px - x1)
        in_box = (
            (px >= min(x1, x2) - 1e-9) & (px <= max(x1, x2) + 1e-9)
            & (py >= min(y1, y2) - 1e-9) & (py <= max(y1, y2) + 1e-9)
        )
        on_edge |= in_box & (cross * cross <= 1e-18 * seg_len2)

    return (inside | on_edge).reshape(height, width)


def polygon_to_mask(polys: Sequence[PolygonAnnotation], height: int, width: int) -> np.ndarray:
    """Union-rasterize polygons onto an HxW boolean grid (multifocal lesions union)."""
    if height <= 0 or width <= 0:
        raise ValueError(f"mask dims must be positive, got {height}x{width}")
    mask = np.zeros((height, width), dtype=bool)
    for poly in polys:
        if poly.area() <= 0.0:
            warnings.warn(f"skipping degenerate polygon (zero area, label={poly.label!r})")
            continue
        mask |= _rasterize_polygon(poly, height, width)
    return mask


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def preprocess(rec: ImageRecord, side: int = 512, normalize: str = "reference") -> FloatImage:
    """Bilinear-resize to side x side, scale to [0, 1], then standardize.

    normalize: 'reference' uses the fixed pretraining-corpus channel stats,
    'per_image' standardizes each image to zero mean / unit variance, and
    'raw01' stops after the [0, 1] scaling (the augmentation pipeline's input).
    """
    px = rec.pixels
    if px.ndim != 3 or px.shape[2] != 3:
        raise ValueError(f"record {rec.id}: expected 3-channel image")
    img = px.astype(np.float32)
    if img.shape[:2] != (side, side):
        img = cv2.resize(img, (side, side), interpolation=cv2.INTER_LINEAR)
    img = img / 255.0

    if normalize == "reference":
        img = (img - REFERENCE_MEAN) / REFERENCE_STD
    elif normalize == "per_image":
        img = (img - img.mean()) / max(float(img.std()), 1e-6)
    elif normalize != "raw01":
        raise ValueError(f"unknown normalization mode {normalize!r}")

    tensor = np.ascontiguousarray(img.transpose(2, 0, 1))
    if not np.isfinite(tensor).all():
        raise ValueError(f"record {rec.id}: non-finite values after preprocessing")
    return FloatImage(tensor=tensor, norm=normalize)


def denormalize(img: FloatImage) -> np.ndarray:
    """Invert preprocessing back to HxWx3 float pixels in [0, 255]."""
    t = img.tensor.transpose(1, 2, 0)
    if img.norm == "reference":
        t = t * REFERENCE_STD + REFERENCE_MEAN
    elif img.norm != "raw01":
        raise ValueError(f"cannot denormalize mode {img.norm!r}")
    return np.clip(t * 255.0, 0.0, 255.0).astype(np.float32)


def normalize_raw01(img: FloatImage) -> FloatImage:
    """Apply the fixed reference standardization to a raw01 tensor."""
    if img.norm != "raw01":
        raise ValueError(f"expected raw01 input, got {img.norm!r}")
    t = (img.tensor - REFERENCE_MEAN[:, None, None]) / REFERENCE_STD[:, None, None]
    return FloatImage(tensor=t.astype(np.float32), norm="reference")


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def patient_split(
    manifest: DatasetManifest,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> DatasetManifest:
    """Assign train/val/test splits per patient by seeded greedy bin-packing.

    Patients are visited largest-first (seeded shuffle breaks ties) and each
    goes to the split with the largest remaining image-count deficit, so the
    achieved ratios deviate from targets by at most one patient's images.
    """
    if len(ratios) != 3:
        raise ValueError("ratios must have exactly 3 entries (train, val, test)")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")

    counts: dict[str, int] = {}
    for rec in manifest.records:
        counts[rec.patient_id] = counts.get(rec.patient_id, 0) + 1
    patients = list(counts)
    if len(patients) < 3:
        raise ManifestError(f"need at least 3 patients to split, got {len(patients)}")

    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    order.sort(key=lambda p: -counts[p])  # stable: ties keep the shuffled order

    total = len(manifest.records)
    targets = [r * total for r in ratios]
    filled = [0.0, 0.0, 0.0]
    assignment: dict[str, str] = {}
    names = ("train", "val", "test")
    for pid in order:
        deficits = [targets[i] - filled[i] for i in range(3)]
        k = int(np.argmax(deficits))
        assignment[pid] = names[k]
        filled[k] += counts[pid]

    records = tuple(replace(r, split=assignment[r.patient_id]) for r in manifest.records)
    return DatasetManifest(records, manifest.root)


def _patient_stratum(manifest: DatasetManifest, pid: str) -> str:
    for rec in manifest.records:
        if rec.patient_id == pid and rec.subtype is not None:
            return rec.subtype.pattern()
    return "none"


def kfold_patient(
    manifest: DatasetManifest, k: int = 5, seed: int = 0
) -> list[tuple[DatasetManifest, DatasetManifest]]:
    """Patient-disjoint k folds, stratified on the concatenated marker pattern
    (unknowns form their own stratum). Returns (train, val) manifest pairs."""
    patients = manifest.patients()
    if k > len(patients):
        raise ManifestError(f"k={k} exceeds the {len(patients)} available patients")
    if k < 2:
        raise ValueError("k must be at least 2")

    strata: dict[str, list[str]] = {}
    for pid in patients:
        strata.setdefault(_patient_stratum(manifest, pid), []).append(pid)

    rng = np.random.default_rng(seed)
    fold_of: dict[str, int] = {}
    cursor = int(rng.integers(k))
    for name in sorted(strata):
        group = strata[name]
        order = [group[i] for i in rng.permutation(len(group))]
        # continuous dealing keeps both stratum counts and fold sizes within +-1
        for pid in order:
            fold_of[pid] = cursor % k
            cursor += 1

    folds = []
    for i in range(k):
        val_recs, train_recs = [], []
        for rec in manifest.records:
            if fold_of[rec.patient_id] == i:
                val_recs.append(replace(rec, split="val"))
            else:
                train_recs.append(replace(rec, split="train"))
        folds.append(
            (DatasetManifest(tuple(train_recs), manifest.root),
             DatasetManifest(tuple(val_recs), manifest.root))
        )
    return folds
