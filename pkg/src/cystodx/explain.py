"""Saliency generation (Grad-CAM) and overlay rendering."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import cv2
import numpy as np
import torch

from .dataio import FloatImage

_CV_COLORMAPS = {"jet": cv2.COLORMAP_JET, "hot": cv2.COLORMAP_HOT, "viridis": cv2.COLORMAP_VIRIDIS}


@dataclass
class SaliencyMap:
    """S x S saliency grid in [0, 1]; `flat` flags an all-zero (no-gradient) map."""

    grid: np.ndarray
    target: str = ""
    layer: str = ""
    flat: bool = False

    def __post_init__(self):
        g = self.grid
        if g.ndim != 2:
            raise ValueError(f"saliency grid must be 2-D, got shape {g.shape}")
        if g.min() < 0 or g.max() > 1:
            raise ValueError("saliency values must lie in [0, 1]")


def _deepest_usable_stage(model, stages, x: torch.Tensor) -> str:
    """Deepest convolutional stage whose spatial extent is at least 4x4."""
    sizes: dict[str, tuple[int, int]] = {}
    handles = []
    for name, module in stages.items():
        def hook(module, args, output, name=name):
            sizes[name] = tuple(output.shape[-2:])
        handles.append(module.register_forward_hook(hook))
    try:
        with torch.no_grad():
            model(x)
    finally:
        for h in handles:
            h.remove()
    usable = [n for n in stages if min(sizes.get(n, (0, 0))) >= 4]
    if not usable:
        raise ValueError("no convolutional stage has a 4x4 or larger extent for this input")
    return usable[-1]


def grad_cam(model, img, target: int = 0, layer: str | None = None) -> SaliencyMap:
    """Gradient-weighted activation map for one output logit.

    Weights are the spatial means of d(logit)/d(activation) at the chosen
    stage; the weighted activation sum is rectified, upsampled to the input
    side, and max-normalized. An identically zero map is returned as-is with
    the `flat` flag set.
    """
    stages = model.conv_stages()
    if layer is not None and layer not in stages:
        raise ValueError(f"unknown layer {layer!r}; valid stages: {list(stages)}")

    if isinstance(img, FloatImage):
        x = torch.from_numpy(img.tensor[None])
    elif isinstance(img, np.ndarray):
        x = torch.from_numpy(img[None] if img.ndim == 3 else img)
    else:
        x = img if img.ndim == 4 else img[None]
    side = x.shape[-1]

    if layer is None:
        layer = _deepest_usable_stage(model, stages, x)

    activations: list[torch.Tensor] = []
    grads: list[torch.Tensor] = []

    def fwd_hook(module, args, output):
        activations.append(output)
        output.register_hook(lambda g: grads.append(g))

    handle = stages[layer].register_forward_hook(fwd_hook)
    was_training = model.training
    model.eval()
    try:
        logits = model(x)
        logits.reshape(logits.shape[0], -1)[0, target].backward()
    finally:
        handle.remove()
        model.train(was_training)

    act = activations[0].detach()[0]  # C x h x w
    grad = grads[0].detach()[0]
    if act.shape[-1] < 4 or act.shape[-2] < 4:
        raise ValueError(f"stage {layer!r} spatial extent {tuple(act.shape[-2:])} is below 4x4")
    weights = grad.mean(dim=(1, 2))
    cam = torch.relu((weights[:, None, None] * act).sum(dim=0)).numpy()

    cam = cv2.resize(cam, (side, side), interpolation=cv2.INTER_LINEAR)
    peak = float(cam.max())
    flat = peak <= 0.0
    if not flat:
        cam = cam / peak
    return SaliencyMap(grid=cam.astype(np.float32), target=str(target), layer=layer, flat=flat)


def apply_colormap(values: np.ndarray, colormap: str = "jet") -> np.ndarray:
    """Map [0, 1] values to HxWx3 uint8 RGB."""
    u8 = np.clip(values * 255.0, 0, 255).round().astype(np.uint8)
    if colormap == "gray":
        return np.stack([u8] * 3, axis=-1)
    if colormap not in _CV_COLORMAPS:
        raise ValueError(f"unknown colormap {colormap!r}")
    bgr = cv2.applyColorMap(u8, _CV_COLORMAPS[colormap])
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


def overlay(pixels: np.ndarray, layer_data, alpha: float = 0.5, colormap: str = "jet") -> np.ndarray:
    """Blend (1 - alpha) * image + alpha * colormapped layer at the image's resolution."""
    if not 0.0 <= alpha <= 1.0:
        warnings.warn(f"alpha {alpha} outside [0, 1]; clamping")
        alpha = min(max(alpha, 0.0), 1.0)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError("overlay expects HxWx3 pixels")
    h, w = pixels.shape[:2]

    if isinstance(layer_data, SaliencyMap):
        values = layer_data.grid
        is_mask = False
    else:
        arr = np.asarray(layer_data)
        is_mask = arr.dtype == bool
        values = arr.astype(np.float32)
    if values.shape != (h, w):
        interp = cv2.INTER_NEAREST if is_mask else cv2.INTER_LINEAR
        values = cv2.resize(values, (w, h), interpolation=interp)

    if alpha == 0.0:
        return pixels.astype(np.uint8).copy()
    colored = apply_colormap(np.clip(values, 0.0, 1.0), colormap)
    blended = (1.0 - alpha) * pixels.astype(np.float64) + alpha * colored.astype(np.float64)
    return np.clip(np.round(blended), 0, 255).astype(np.uint8)


def save_saliency_png16(sal: SaliencyMap, path) -> None:
    """Export the grid as a single-channel 16-bit PNG for downstream analysis."""
    grid = np.round(sal.grid * 65535.0).astype(np.uint16)
    cv2.imwrite(str(path), grid)
