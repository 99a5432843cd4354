"""HTTP inference service: classification, segmentation, subtyping, and
Grad-CAM explanations over uploaded images, backed by a read-only model registry."""
from __future__ import annotations

import base64
import json
import os
import threading
import time
from contextlib import asynccontextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
import torch
from fastapi import FastAPI, File, Form, HTTPException, UploadFile

from .dataio import ImageRecord, decode_image_bytes, preprocess, resize_mask
from .explain import grad_cam, overlay
from .nnblocks import build_from_checkpoint, load_checkpoint

MARKERS = ("her2", "ki67", "p53")


# ---------------------------------------------------------------------------
# run-length mask wire format
# ---------------------------------------------------------------------------

def rle_encode(mask: np.ndarray) -> dict:
    """Row-major RLE; counts alternate runs of 0s and 1s, starting with 0s."""
    mask = np.asarray(mask, dtype=bool)
    flat = mask.ravel()
    counts = []
    if flat.size:
        changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
        bounds = np.concatenate([[0], changes, [flat.size]])
        runs = np.diff(bounds).tolist()
        if flat[0]:
            counts.append(0)
        counts.extend(int(r) for r in runs)
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": counts, "order": "row-major"}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos, value = 0, False
    for run in rle["counts"]:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    if pos != h * w:
        raise ValueError(f"RLE covers {pos} pixels, expected {h * w}")
    return flat.reshape(h, w)


# ---------------------------------------------------------------------------
# model registry
# ---------------------------------------------------------------------------

@dataclass
class LoadedModel:
    task: str
    module: torch.nn.Module
    version: str
    input_side: int
    threshold: float
    native: bool

    def probabilities(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return torch.sigmoid(self.module(x))


class ModelRegistry:
    """Task -> model map, loaded fully at startup and read-only afterwards."""

    def __init__(self, models: dict[str, LoadedModel], audit_dir: Optional[Path] = None):
        self.models = models
        self.audit_dir = audit_dir
        self.explain_lock = threading.Lock()

    @classmethod
    def load(cls, path) -> "ModelRegistry":
        path = Path(path)
        with open(path) as f:
            spec = json.load(f)
        audit = spec.pop("audit_dir", None) or os.environ.get("CYSTODX_AUDIT_DIR")
        models: dict[str, LoadedModel] = {}
        for task, entry in spec.items():
            if task in models:
                raise ValueError(f"duplicate registry entry for task {task!r}")
            version = entry.get("version", "v0")
            threshold = float(entry.get("threshold", 0.5))
            if "checkpoint" in entry:
                ckpt_path = path.parent / entry["checkpoint"]
                ckpt = load_checkpoint(ckpt_path)
                module = build_from_checkpoint(ckpt)
                side = int(entry.get("input_side", ckpt.config.input_side))
                native = True
            elif "graph" in entry:
                module = torch.jit.load(str(path.parent / entry["graph"]))
                module.eval()
                side = int(entry["input_side"])
                native = False
            else:
                raise ValueError(f"registry entry {task!r} needs 'checkpoint' or 'graph'")
            models[task] = LoadedModel(task, module, version, side, threshold, native)
        return cls(models, Path(audit) if audit else None)

    def get(self, task: str) -> LoadedModel:
        if task not in self.models:
            raise HTTPException(status_code=404, detail=f"no active model for task {task!r}")
        return self.models[task]


# ---------------------------------------------------------------------------
# app
# ---------------------------------------------------------------------------

def _png_b64(pixels: np.ndarray) -> str:
    ok, buf = cv2.imencode(".png", cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR))
    if not ok:
        raise RuntimeError("PNG encoding failed")
    return base64.b64encode(buf.tobytes()).decode("ascii")


def _png16_b64(grid: np.ndarray) -> str:
    u16 = np.round(np.clip(grid, 0, 1) * 65535.0).astype(np.uint16)
    ok, buf = cv2.imencode(".png", u16)
    if not ok:
        raise RuntimeError("PNG encoding failed")
    return base64.b64encode(buf.tobytes()).decode("ascii")


def _check_threshold(value: float, name: str) -> float:
    if not 0.0 < value < 1.0:
        raise HTTPException(status_code=400, detail=f"{name} must lie strictly in (0, 1)")
    return value


async def _read_pixels(upload: UploadFile, registry: ModelRegistry) -> np.ndarray:
    data = await upload.read()
    try:
        pixels = decode_image_bytes(data)
    except Exception:
        raise HTTPException(
            status_code=422, detail=f"cannot decode {upload.filename!r} as JPEG/PNG/BMP"
        )
    if registry.audit_dir is not None:
        registry.audit_dir.mkdir(parents=True, exist_ok=True)
        stamp = f"{time.time():.6f}_{upload.filename or 'upload'}"
        with open(registry.audit_dir / stamp, "wb") as f:
            f.write(data)
    return pixels


def _prepare(pixels: np.ndarray, model: LoadedModel) -> torch.Tensor:
    rec = ImageRecord(id="upload", patient_id="-", pixels=pixels)
    img = preprocess(rec, side=model.input_side, normalize="reference")
    return torch.from_numpy(img.tensor[None])


def create_app(registry=None) -> FastAPI:
    """Build the service. `registry` may be a ModelRegistry, a path to a
    registry JSON, or None (falls back to $CYSTODX_REGISTRY at startup)."""

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if app.state.registry is None:
            path = app.state.registry_path or os.environ.get("CYSTODX_REGISTRY")
            if path:
                app.state.registry = ModelRegistry.load(path)
        yield

    app = FastAPI(title="cystodx inference service", lifespan=lifespan)
    app.state.registry = registry if isinstance(registry, ModelRegistry) else None
    app.state.registry_path = registry if not isinstance(registry, ModelRegistry) else None

    def registry_or_503() -> ModelRegistry:
        if app.state.registry is None:
            raise HTTPException(status_code=503, detail="models are still loading")
        return app.state.registry

    @app.get("/api/v1/health")
    def health():
        reg = app.state.registry
        if reg is None:
            return {"status": "loading", "models": {}}
        return {
            "status": "ready",
            "models": {
                task: {
                    "version": m.version,
                    "input_side": m.input_side,
                    "default_threshold": m.threshold,
                    "native": m.native,
                }
                for task, m in reg.models.items()
            },
        }

    @app.post("/api/v1/classify")
    async def classify(
        files: list[UploadFile] = File(...),
        threshold: Optional[float] = Form(None),
    ):
        reg = registry_or_503()
        model = reg.get("classify")
        t = _check_threshold(threshold if threshold is not None else model.threshold, "threshold")
        predictions = []
        for upload in files:
            start = time.perf_counter()
            pixels = await _read_pixels(upload, reg)
            prob = float(model.probabilities(_prepare(pixels, model)).reshape(-1)[0])
            predictions.append({
                "task": "classify",
                "filename": upload.filename,
                "probability": prob,
                "label": int(prob >= t),
                "threshold": t,
                "model_version": model.version,
                "latency_ms": (time.perf_counter() - start) * 1000.0,
            })
        return predictions if len(predictions) > 1 else predictions[0]

    @app.post("/api/v1/segment")
    async def segment(
        file: UploadFile = File(...),
        overlay_alpha: float = Form(0.5),
        mask_threshold: Optional[float] = Form(None),
    ):
        reg = registry_or_503()
        model = reg.get("segment")
        t = _check_threshold(
            mask_threshold if mask_threshold is not None else model.threshold, "mask_threshold"
        )
        if not 0.0 <= overlay_alpha <= 1.0:
            raise HTTPException(status_code=400, detail="overlay_alpha must lie in [0, 1]")
        start = time.perf_counter()
        pixels = await _read_pixels(file, reg)
        probs = model.probabilities(_prepare(pixels, model))[0, 0].numpy()
        mask = probs >= t
        full_mask = resize_mask(mask, pixels.shape[0], pixels.shape[1])
        rendered = overlay(pixels, full_mask, alpha=overlay_alpha, colormap="jet")
        return {
            "task": "segment",
            "filename": file.filename,
            "mask_rle": rle_encode(full_mask),
            "mask_pixels": int(full_mask.sum()),
            "mask_threshold": t,
            "overlay_alpha": overlay_alpha,
            "overlay_png_b64": _png_b64(rendered),
            "model_version": model.version,
            "latency_ms": (time.perf_counter() - start) * 1000.0,
        }

    @app.post("/api/v1/subtype")
    async def subtype(
        file: UploadFile = File(...),
        enable: bool = Form(False),
        threshold: Optional[float] = Form(None),
    ):
        reg = registry_or_503()
        if not enable:
            raise HTTPException(
                status_code=403,
                detail="molecular subtyping is exploratory and disabled by default; "
                "resend with enable=true to run it",
            )
        model = reg.get("subtype")
        t = _check_threshold(threshold if threshold is not None else model.threshold, "threshold")
        start = time.perf_counter()
        pixels = await _read_pixels(file, reg)
        probs = model.probabilities(_prepare(pixels, model)).reshape(-1).tolist()
        return {
            "task": "subtype",
            "filename": file.filename,
            "exploratory": True,
            "markers": {
                name: {"probability": p, "label": int(p >= t)}
                for name, p in zip(MARKERS, probs)
            },
            "threshold": t,
            "model_version": model.version,
            "latency_ms": (time.perf_counter() - start) * 1000.0,
        }

    @app.post("/api/v1/explain")
    async def explain(
        file: UploadFile = File(...),
        task: str = Form("classify"),
        target: int = Form(0),
        overlay_alpha: float = Form(0.5),
    ):
        reg = registry_or_503()
        model = reg.get(task)
        if not model.native:
            raise HTTPException(
                status_code=400,
                detail=f"task {task!r} runs an exported graph; explanations need a native checkpoint",
            )
        n_outputs = 3 if task == "subtype" else 1
        if not 0 <= target < n_outputs:
            raise HTTPException(
                status_code=400, detail=f"target {target} invalid; task {task!r} has {n_outputs} outputs"
            )
        if not 0.0 <= overlay_alpha <= 1.0:
            raise HTTPException(status_code=400, detail="overlay_alpha must lie in [0, 1]")
        start = time.perf_counter()
        pixels = await _read_pixels(file, reg)
        x = _prepare(pixels, reg.get(task))
        with reg.explain_lock:  # gradient machinery is serialized per replica
            sal = grad_cam(model.module, x, target=target)
        rendered = overlay(pixels, sal, alpha=overlay_alpha, colormap="jet")
        return {
            "task": task,
            "filename": file.filename,
            "target": target,
            "layer": sal.layer,
            "flat": sal.flat,
            "overlay_png_b64": _png_b64(rendered),
            "saliency_png16_b64": _png16_b64(sal.grid),
            "model_version": model.version,
            "latency_ms": (time.perf_counter() - start) * 1000.0,
        }

    return app


def app_factory() -> FastAPI:
    """Uvicorn factory entry point; reads $CYSTODX_REGISTRY."""
    return create_app()


def run_server(registry_path, host: str = "0.0.0.0", port: Optional[int] = None,
               workers: Optional[int] = None):
    """Start uvicorn with the given registry (ports/workers fall back to env vars)."""
    import uvicorn

    port = port or int(os.environ.get("CYSTODX_PORT", "8000"))
    workers = workers or int(os.environ.get("CYSTODX_WORKERS", "1"))
    if workers > 1:
        os.environ["CYSTODX_REGISTRY"] = str(registry_path)
        uvicorn.run("cystodx.serve:app_factory", factory=True,
                    host=host, port=port, workers=workers)
    else:
        uvicorn.run(create_app(registry_path), host=host, port=port)
