"""Synthetic desk-scale corpora: bright-blob lesions on textured backgrounds.

Clinical data is private; these generators produce separable stand-in tasks so
the pipeline's learning behavior and contracts can be exercised end to end.
"""
from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np

from .dataio import save_mask
from .train import ArraySet


def _background(side: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth pinkish mucosa-like texture in [0, 1], HxWx3."""
    base = rng.uniform(0.35, 0.55, (side, side, 3)).astype(np.float32)
    base = cv2.GaussianBlur(base, (0, 0), side / 16)
    base[..., 0] += 0.15  # red-dominant tint
    noise = rng.normal(0.0, 0.03, (side, side, 3)).astype(np.float32)
    return np.clip(base + noise, 0.0, 1.0)


def _blob_mask(side: int, rng: np.random.Generator) -> np.ndarray:
    """Irregular elliptical lesion occupying roughly 2-12% of the frame."""
    mask = np.zeros((side, side), dtype=np.uint8)
    cy = int(rng.integers(side // 4, 3 * side // 4))
    cx = int(rng.integers(side // 4, 3 * side // 4))
    a = int(rng.integers(side // 10, side // 4))
    b = int(rng.integers(side // 10, side // 4))
    angle = float(rng.uniform(0, 180))
    cv2.ellipse(mask, (cx, cy), (a, b), angle, 0, 360, 1, -1)
    return mask.astype(bool)


def _paint_lesion(img: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    side = img.shape[0]
    soft = cv2.GaussianBlur(mask.astype(np.float32), (0, 0), side / 40)
    soft = soft / max(soft.max(), 1e-6)
    tint = np.array([0.35, 0.25, 0.05], dtype=np.float32) * rng.uniform(0.8, 1.2)
    return np.clip(img + soft[..., None] * tint, 0.0, 1.0)


def make_blob_arrays(
    n: int = 200,
    side: int = 64,
    seed: int = 0,
    task: str = "classify",
    images_per_patient: int = 4,
) -> tuple[ArraySet, np.ndarray]:
    """In-memory corpus; returns (arrays, patient_ids). Positives carry a blob."""
    rng = np.random.default_rng(seed)
    images = np.empty((n, 3, side, side), dtype=np.float32)
    labels = np.zeros(n, dtype=np.float32)
    masks = np.zeros((n, 1, side, side), dtype=bool)
    patients = np.array([f"p{i // images_per_patient:03d}" for i in range(n)])

    for i in range(n):
        img = _background(side, rng)
        positive = i % 2 == 0
        if positive:
            mask = _blob_mask(side, rng)
            img = _paint_lesion(img, mask, rng)
            masks[i, 0] = mask
            labels[i] = 1.0
        images[i] = img.transpose(2, 0, 1)

    data = ArraySet(images=images, norm="raw01")
    if task == "classify":
        data.labels = labels
    elif task == "segment":
        data.masks = masks
    else:
        raise ValueError("in-memory corpora cover classify and segment")
    return data, patients


def split_arrays(data: ArraySet, patients: np.ndarray, seed: int = 0,
                 ratios=(0.8, 0.1, 0.1)) -> dict[str, ArraySet]:
    """Patient-level greedy split of an in-memory ArraySet."""
    unique, counts = np.unique(patients, return_counts=True)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(unique))
    ordered = sorted(order, key=lambda k: -counts[k])
    targets = [r * len(patients) for r in ratios]
    filled = [0.0, 0.0, 0.0]
    names = ("train", "val", "test")
    assign: dict[str, str] = {}
    for k in ordered:
        j = int(np.argmax([targets[m] - filled[m] for m in range(3)]))
        assign[unique[k]] = names[j]
        filled[j] += counts[k]

    out = {}
    for name in names:
        sel = np.array([assign[p] == name for p in patients])
        out[name] = ArraySet(
            images=data.images[sel],
            labels=None if data.labels is None else data.labels[sel],
            masks=None if data.masks is None else data.masks[sel],
            subtype_targets=None if data.subtype_targets is None else data.subtype_targets[sel],
            subtype_known=None if data.subtype_known is None else data.subtype_known[sel],
            norm=data.norm,
        )
    return out


def write_blob_corpus(
    out_dir,
    n: int = 24,
    side: int = 96,
    seed: int = 0,
    with_masks: bool = True,
    with_subtype: bool = False,
    with_labelme: bool = False,
    images_per_patient: int = 2,
) -> Path:
    """Materialize a corpus on disk: PNG images, optional mask PNGs or LabelMe
    polygon files, and a manifest. Returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    if with_masks:
        (out_dir / "masks").mkdir(exist_ok=True)
    if with_labelme:
        (out_dir / "annotations").mkdir(exist_ok=True)

    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        img = _background(side, rng)
        positive = i % 2 == 0
        mask = None
        if positive:
            mask = _blob_mask(side, rng)
            img = _paint_lesion(img, mask, rng)
        u8 = np.clip(img * 255.0, 0, 255).astype(np.uint8)
        img_rel = f"images/img_{i:04d}.png"
        cv2.imwrite(str(out_dir / img_rel), cv2.cvtColor(u8, cv2.COLOR_RGB2BGR))

        rec = {
            "id": f"img_{i:04d}",
            "patient_id": f"p{i // images_per_patient:03d}",
            "image_path": img_rel,
            "tumor_label": int(positive),
        }
        if positive and with_masks and mask is not None:
            mask_rel = f"masks/img_{i:04d}.png"
            save_mask(mask, out_dir / mask_rel)
            rec["mask_path"] = mask_rel
        if positive and with_labelme and mask is not None:
            contours, _ = cv2.findContours(
                mask.astype(np.uint8), cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_SIMPLE
            )
            shapes = [
                {"label": "lesion", "shape_type": "polygon",
                 "points": c.reshape(-1, 2).astype(float).tolist()}
                for c in contours if len(c) >= 3
            ]
            with open(out_dir / "annotations" / f"img_{i:04d}.json", "w") as f:
                json.dump({"shapes": shapes, "imageHeight": side, "imageWidth": side}, f)
        if with_subtype:
            # markers correlate with blob size so the task carries signal
            area = 0 if mask is None else int(mask.sum())
            big = area > (side * side) // 16
            rec["her2"] = int(big)
            rec["ki67"] = int(positive)
            rec["p53"] = int(rng.random() < (0.7 if big else 0.3))
        records.append(rec)

    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w") as f:
        json.dump(records, f, indent=2)
    return manifest_path
