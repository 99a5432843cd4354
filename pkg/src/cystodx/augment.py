"""Training-time augmentation: paired geometric/photometric transforms and batch mixers."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import cv2
import numpy as np

from .dataio import FloatImage


@dataclass
class AugmentConfig:
    flip_h_p: float = 0.0
    flip_v_p: float = 0.0
    rot_max_deg: float = 0.0
    crop_scale: tuple[float, float] = (1.0, 1.0)
    jitter: tuple[float, float] = (0.0, 0.0)  # brightness, contrast half-ranges
    noise_sigma: float = 0.0
    elastic: tuple[float, float] = (0.0, 0.0)  # displacement alpha (px), smoothing sigma
    grid_distort: tuple[int, float] = (0, 0.0)  # cells per side, max node shift (px)
    clahe_clip: float = 0.0  # 0 disables
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_h_p", "flip_v_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.crop_scale[0] > self.crop_scale[1]:
            raise ValueError("crop_scale range must be ordered (min, max)")
        if not 0.0 < self.crop_scale[0] <= 1.0 or self.crop_scale[1] > 1.0:
            raise ValueError("crop_scale fractions must be in (0, 1]")
        if self.noise_sigma < 0 or self.rot_max_deg < 0 or self.clahe_clip < 0:
            raise ValueError("noise_sigma, rot_max_deg and clahe_clip must be >= 0")


def rng_for_sample(seed: int, sample_index: int) -> np.random.Generator:
    """Derive the per-sample generator; reruns with the same pair are bit-exact."""
    return np.random.default_rng([seed, sample_index])


@dataclass
class GeometricParams:
    """One sampled spatial transform, applicable to an image and its mask alike."""

    flip_h: bool = False
    flip_v: bool = False
    angle: float = 0.0
    crop: Optional[tuple[int, int, int]] = None  # y0, x0, size
    elastic_maps: Optional[tuple[np.ndarray, np.ndarray]] = None
    grid_maps: Optional[tuple[np.ndarray, np.ndarray]] = None


def sample_geometric(cfg: AugmentConfig, side: int, rng: np.random.Generator) -> GeometricParams:
    """Draw transform parameters. The draw sequence depends only on cfg, never
    on whether a mask accompanies the image, so image/mask pairing commutes."""
    params = GeometricParams()
    params.flip_h = bool(rng.random() < cfg.flip_h_p)
    params.flip_v = bool(rng.random() < cfg.flip_v_p)
    if cfg.rot_max_deg > 0:
        params.angle = float(rng.uniform(-cfg.rot_max_deg, cfg.rot_max_deg))
    if cfg.crop_scale != (1.0, 1.0):
        s = rng.uniform(cfg.crop_scale[0], cfg.crop_scale[1])
        size = max(1, int(round(side * s)))
        size = min(size, side)
        y0 = int(rng.integers(0, side - size + 1))
        x0 = int(rng.integers(0, side - size + 1))
        params.crop = (y0, x0, size)
    alpha, sigma = cfg.elastic
    if alpha > 0:
        params.elastic_maps = _elastic_maps(side, alpha, sigma, rng)
    cells, max_shift = cfg.grid_distort
    if cells > 0 and max_shift > 0:
        params.grid_maps = _grid_maps(side, cells, max_shift, rng)
    return params


def _elastic_maps(side: int, alpha: float, sigma: float, rng) -> tuple[np.ndarray, np.ndarray]:
    dx = rng.uniform(-1.0, 1.0, (side, side)).astype(np.float32)
    dy = rng.uniform(-1.0, 1.0, (side, side)).astype(np.float32)
    if sigma > 0:
        dx = cv2.GaussianBlur(dx, (0, 0), sigma)
        dy = cv2.GaussianBlur(dy, (0, 0), sigma)
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float32)
    return xs + dx * alpha, ys + dy * alpha


def _grid_maps(side: int, cells: int, max_shift: float, rng) -> tuple[np.ndarray, np.ndarray]:
    nodes = np.linspace(0, side - 1, cells + 1)
    src_x = nodes.copy()
    src_y = nodes.copy()
    # interior nodes only; the frame stays pinned
    src_x[1:-1] += rng.uniform(-max_shift, max_shift, max(cells - 1, 0))
    src_y[1:-1] += rng.uniform(-max_shift, max_shift, max(cells - 1, 0))
    coords = np.arange(side, dtype=np.float64)
    map_1d_x = np.interp(coords, nodes, src_x).astype(np.float32)
    map_1d_y = np.interp(coords, nodes, src_y).astype(np.float32)
    map_x = np.tile(map_1d_x[None, :], (side, 1))
    map_y = np.tile(map_1d_y[:, None], (1, side))
    return map_x, map_y


def _warp_hwc(arr: np.ndarray, params: GeometricParams, is_mask: bool) -> np.ndarray:
    """Apply the sampled transform to an HxW(xC) array."""
    interp = cv2.INTER_NEAREST if is_mask else cv2.INTER_LINEAR
    out = arr
    if params.flip_h:
        out = out[:, ::-1].copy()
    if params.flip_v:
        out = out[::-1].copy()
    h, w = out.shape[:2]
    if params.angle != 0.0:
        center = ((w - 1) / 2.0, (h - 1) / 2.0)
        mat = cv2.getRotationMatrix2D(center, params.angle, 1.0)
        out = cv2.warpAffine(out, mat, (w, h), flags=interp,
                             borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    if params.crop is not None:
        y0, x0, size = params.crop
        out = out[y0:y0 + size, x0:x0 + size]
        out = cv2.resize(out, (w, h), interpolation=interp)
    if params.elastic_maps is not None:
        mx, my = params.elastic_maps
        out = cv2.remap(out, mx, my, interpolation=interp,
                        borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    if params.grid_maps is not None:
        mx, my = params.grid_maps
        out = cv2.remap(out, mx, my, interpolation=interp,
                        borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return out


def apply_geometric_params(
    img: FloatImage, mask: Optional[np.ndarray], params: GeometricParams
) -> tuple[FloatImage, Optional[np.ndarray]]:
    """Apply one sampled transform: bilinear for the image, nearest for the mask."""
    hwc = img.tensor.transpose(1, 2, 0)
    warped = _warp_hwc(np.ascontiguousarray(hwc), params, is_mask=False)
    out_img = FloatImage(tensor=np.ascontiguousarray(warped.transpose(2, 0, 1)), norm=img.norm)
    out_mask = None
    if mask is not None:
        warped_mask = _warp_hwc(mask.astype(np.uint8), params, is_mask=True)
        out_mask = warped_mask.astype(bool)
    return out_img, out_mask


def apply_geometric(
    img: FloatImage,
    mask: Optional[np.ndarray],
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[FloatImage, Optional[np.ndarray]]:
    if mask is not None and mask.shape != img.tensor.shape[1:]:
        raise ValueError(f"mask shape {mask.shape} does not match image {img.tensor.shape[1:]}")
    params = sample_geometric(cfg, img.side, rng)
    return apply_geometric_params(img, mask, params)


def apply_photometric(img: FloatImage, cfg: AugmentConfig, rng: np.random.Generator) -> FloatImage:
    """Jitter, Gaussian noise, then optional adaptive histogram equalization."""
    x = img.tensor.astype(np.float32).copy()
    jb, jc = cfg.jitter
    if jb > 0:
        x *= float(rng.uniform(1.0 - jb, 1.0 + jb))
    if jc > 0:
        c = float(rng.uniform(1.0 - jc, 1.0 + jc))
        m = float(x.mean())
        x = m + (x - m) * c
    if cfg.noise_sigma > 0:
        x = x + rng.normal(0.0, cfg.noise_sigma, x.shape).astype(np.float32)
    if cfg.clahe_clip > 0:
        clahe = cv2.createCLAHE(clipLimit=cfg.clahe_clip, tileGridSize=(8, 8))
        for ch in range(3):
            u8 = np.clip(x[ch] * 255.0, 0, 255).round().astype(np.uint8)
            x[ch] = clahe.apply(u8).astype(np.float32) / 255.0
    return FloatImage(tensor=x, norm=img.norm)


# ---------------------------------------------------------------------------
# batch mixers
# ---------------------------------------------------------------------------

@dataclass
class MixedBatch:
    images: np.ndarray  # B x 3 x S x S
    labels: np.ndarray  # B x K soft labels
    lam: float
    masks: Optional[np.ndarray] = None


def mixup(
    images: np.ndarray,
    labels: np.ndarray,
    alpha: float = 0.2,
    rng: Optional[np.random.Generator] = None,
    lam: Optional[float] = None,
    masks: Optional[np.ndarray] = None,
) -> MixedBatch:
    """Convex-combine each sample with its reversed-batch partner; labels mix
    identically. Reversal (not a random permutation) guarantees no sample is
    paired with itself in even batches."""
    if images.shape[0] < 2:
        raise ValueError("mixup needs a batch of at least 2")
    if alpha <= 0:
        raise ValueError("mixup alpha must be > 0")
    rng = rng or np.random.default_rng()
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    mixed = lam * images + (1.0 - lam) * images[::-1]
    mixed_labels = lam * labels + (1.0 - lam) * labels[::-1]
    mixed_masks = None
    if masks is not None:
        mixed_masks = lam * masks.astype(np.float32) + (1.0 - lam) * masks[::-1].astype(np.float32)
    return MixedBatch(images=mixed, labels=mixed_labels, lam=lam, masks=mixed_masks)


def sample_cutmix_box(
    height: int, width: int, lam: float, rng: np.random.Generator
) -> tuple[int, int, int, int]:
    """Uniform-center box with side = S * sqrt(1 - lam), clipped at the borders."""
    cut = float(np.sqrt(max(0.0, 1.0 - lam)))
    bh, bw = int(round(height * cut)), int(round(width * cut))
    cy = int(rng.integers(0, height))
    cx = int(rng.integers(0, width))
    top, left = cy - bh // 2, cx - bw // 2
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + bh, height), min(left + bw, width)
    return y0, y1, x0, x1


def cutmix(
    images: np.ndarray,
    labels: np.ndarray,
    alpha: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    lam: Optional[float] = None,
    box: Optional[tuple[int, int, int, int]] = None,
    masks: Optional[np.ndarray] = None,
) -> MixedBatch:
    """Paste a partner rectangle into each image; the mixing weight is the exact
    surviving-area fraction after border clipping, so labels are exact."""
    if images.shape[0] < 2:
        raise ValueError("cutmix needs a batch of at least 2")
    if alpha <= 0:
        raise ValueError("cutmix alpha must be > 0")
    rng = rng or np.random.default_rng()
    h, w = images.shape[2], images.shape[3]
    raw_lam = float(rng.beta(alpha, alpha)) if lam is None else float(lam)
    if box is None:
        box = sample_cutmix_box(h, w, raw_lam, rng)
    y0, y1, x0, x1 = box
    area = max(y1 - y0, 0) * max(x1 - x0, 0)
    lam_adj = 1.0 - area / float(h * w)

    out = images.copy()
    out[:, :, y0:y1, x0:x1] = images[::-1][:, :, y0:y1, x0:x1]
    mixed_labels = lam_adj * labels + (1.0 - lam_adj) * labels[::-1]
    mixed_masks = None
    if masks is not None:
        mixed_masks = masks.astype(np.float32).copy()
        mixed_masks[:, :, y0:y1, x0:x1] = masks[::-1].astype(np.float32)[:, :, y0:y1, x0:x1]
    return MixedBatch(images=out, labels=mixed_labels, lam=lam_adj, masks=mixed_masks)
