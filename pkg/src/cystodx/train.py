"""Training loops for all three tasks: optimizer/schedule protocol, early
stopping, patient-level cross-validation, and the ablation harness."""
from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import losses as L
from . import metrics as M
from .augment import AugmentConfig, apply_geometric, apply_photometric, cutmix, mixup, rng_for_sample
from .dataio import DatasetManifest, FloatImage, ImageRecord, load_image, load_mask, preprocess, resize_mask, subtype_arrays
from .losses import LossConfig
from .metrics import MetricReport
from .nnblocks import Checkpoint, ModelConfig, build_model
from .nnblocks.models import checkpoint_from_model

MIX_MODES = ("none", "mixup", "cutmix", "both")


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainConfig:
    task: str = "classify"
    epochs: int = 100
    batch_size: int = 16  # paper protocol: 16 for classify/subtype, 8 for segment
    lr0: float = 1e-4
    lr_min: float = 0.0
    schedule: Optional[str] = None  # cosine | constant; None = task default
    early_stop_patience: int = 15
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    mix: str = "none"
    mix_alpha_mixup: float = 0.2
    mix_alpha_cutmix: float = 1.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.mix not in MIX_MODES:
            raise ValueError(f"mix must be one of {MIX_MODES}")
        if self.schedule not in (None, "cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def effective_schedule(self) -> str:
        if self.schedule is not None:
            return self.schedule
        # constant LR converges more stably for mask outputs
        return "constant" if self.task == "segment" else "cosine"


@dataclass
class RunReport:
    config: dict
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)
    best_epoch: int = 0
    metrics: Optional[MetricReport] = None
    wall_clock_s: float = 0.0
    first_batch_hash: str = ""
    name: str = ""


def cosine_lr(t: int, T: int, lr0: float, lr_min: float = 0.0) -> float:
    """Cosine annealing: lr_min + 0.5 * (lr0 - lr_min) * (1 + cos(pi * t / T))."""
    if not 0 <= t <= T:
        raise ValueError(f"epoch {t} outside [0, {T}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / T))


class EarlyStopper:
    """Patience-based stopping on validation loss; tracks the best epoch."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best_loss = float("inf")
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


@dataclass
class ArraySet:
    """In-memory dataset: images as B x 3 x S x S float32 plus task targets."""

    images: np.ndarray
    labels: Optional[np.ndarray] = None       # (N,) binary, classification
    masks: Optional[np.ndarray] = None        # (N, 1, S, S) bool, segmentation
    subtype_targets: Optional[np.ndarray] = None  # (N, 3) float
    subtype_known: Optional[np.ndarray] = None    # (N, 3) bool
    norm: str = "raw01"

    def __len__(self) -> int:
        return self.images.shape[0]


def load_arrays(manifest: DatasetManifest, task: str, side: int) -> ArraySet:
    """Materialize a manifest into arrays (raw01 tensors; fit standardizes)."""
    images, labels, masks, subtypes = [], [], [], []
    for rec in manifest.records:
        pixels = load_image(manifest.resolve(rec.image_path))
        img = preprocess(ImageRecord(rec.id, rec.patient_id, pixels), side, normalize="raw01")
        images.append(img.tensor)
        if task == "classify":
            if rec.tumor_label is None:
                raise ValueError(f"record {rec.id} lacks a tumor label")
            labels.append(rec.tumor_label)
        elif task == "segment":
            if rec.mask_path is None:
                mask = np.zeros((side, side), dtype=bool)
            else:
                mask = resize_mask(load_mask(manifest.resolve(rec.mask_path)), side, side)
            masks.append(mask[None])
        elif task == "subtype":
            if rec.subtype is None:
                raise ValueError(f"record {rec.id} lacks subtype labels")
            subtypes.append(rec.subtype)
    out = ArraySet(images=np.stack(images))
    if task == "classify":
        out.labels = np.asarray(labels, dtype=np.float32)
    elif task == "segment":
        out.masks = np.stack(masks)
    else:
        out.subtype_targets, out.subtype_known = subtype_arrays(subtypes)
    return out


REFERENCE_MEAN_T = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
REFERENCE_STD_T = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)


def _standardize(x: torch.Tensor) -> torch.Tensor:
    return (x - REFERENCE_MEAN_T) / REFERENCE_STD_T


def _augment_batch(
    images: np.ndarray,
    masks: Optional[np.ndarray],
    cfg: TrainConfig,
    epoch: int,
    indices: np.ndarray,
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    out_imgs = np.empty_like(images)
    out_masks = masks.copy() if masks is not None else None
    for b, idx in enumerate(indices):
        rng = rng_for_sample(cfg.augment.seed + epoch, int(idx))
        fi = FloatImage(tensor=images[b], norm="raw01")
        mask = masks[b, 0] if masks is not None else None
        fi, mask = apply_geometric(fi, mask, cfg.augment, rng)
        fi = apply_photometric(fi, cfg.augment, rng)
        out_imgs[b] = fi.tensor
        if out_masks is not None:
            out_masks[b, 0] = mask
    return out_imgs, out_masks


def _batch_loss(model, xb: torch.Tensor, target, task: str, cfg: LossConfig) -> torch.Tensor:
    out = model(xb)
    if task == "classify":
        p = torch.sigmoid(out.squeeze(1))
        return L.classification_loss(p, target, cfg)
    if task == "segment":
        p = torch.sigmoid(out)
        return L.compound_seg_loss(p, target, cfg)
    targets, known = target
    return L.masked_multilabel_bce(out, targets, known)


def _hash_array(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()[:16]


def predict_scores(model, data: ArraySet, batch_size: int = 32) -> np.ndarray:
    """Eval-mode sigmoid outputs: (N,) for classify, (N,1,S,S) for segment, (N,3) for subtype."""
    model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            xb = _standardize(torch.from_numpy(data.images[i:i + batch_size]))
            outs.append(torch.sigmoid(model(xb)).numpy())
    out = np.concatenate(outs)
    return out.squeeze(1) if out.ndim == 2 and out.shape[1] == 1 else out


def evaluate(model, data: ArraySet, task: str, threshold: float = 0.5) -> MetricReport:
    scores = predict_scores(model, data)
    if task == "classify":
        return M.classification_metrics(scores, data.labels.astype(int), threshold)
    if task == "segment":
        preds = [s[0] >= threshold for s in scores]
        trues = [m[0].astype(bool) for m in data.masks]
        return M.seg_metrics_dataset(preds, trues)
    report = MetricReport(task="subtype")
    aucs = []
    for j, marker in enumerate(("her2", "ki67", "p53")):
        known = data.subtype_known[:, j]
        labels = data.subtype_targets[known, j].astype(int)
        if known.sum() and 0 < labels.sum() < labels.size:
            auc = M.roc_auc(scores[known, j], labels)
            report.per_class[marker] = {"auc": auc}
            aucs.append(auc)
        else:
            report.flags.append(f"{marker} AUC undefined on this set")
    if aucs:
        report.scalars["auc_mean"] = float(np.mean(aucs))
    return report


def _val_loss(model, data: ArraySet, task: str, cfg: TrainConfig) -> float:
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(data), cfg.batch_size):
            xb = _standardize(torch.from_numpy(data.images[i:i + cfg.batch_size]))
            n = xb.shape[0]
            target = _make_target(data, np.arange(i, i + n), task)
            total += float(_batch_loss(model, xb, target, task, cfg.loss)) * n
            count += n
    return total / count


def _make_target(data: ArraySet, idx: np.ndarray, task: str):
    if task == "classify":
        return torch.from_numpy(data.labels[idx])
    if task == "segment":
        return torch.from_numpy(data.masks[idx].astype(np.float32))
    return (
        torch.from_numpy(data.subtype_targets[idx]),
        torch.from_numpy(data.subtype_known[idx]),
    )


def fit(model, train_data: ArraySet, val_data: ArraySet, cfg: TrainConfig) -> tuple[Checkpoint, RunReport]:
    """Adam training with the task's schedule, early stopping on validation
    loss, and best-checkpoint return. Deterministic for a fixed seed."""
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("train and validation sets must be non-empty")
    if model.config.task != cfg.task:
        raise ValueError(f"model task {model.config.task!r} != config task {cfg.task!r}")

    start = time.time()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr0, betas=(0.9, 0.999))
    stopper = EarlyStopper(cfg.early_stop_patience)
    schedule = cfg.effective_schedule()
    report = RunReport(config={"task": cfg.task, "seed": cfg.seed, "epochs": cfg.epochs})
    best_state = None

    for epoch in range(1, cfg.epochs + 1):
        lr = cosine_lr(epoch - 1, cfg.epochs, cfg.lr0, cfg.lr_min) if schedule == "cosine" else cfg.lr0
        for group in opt.param_groups:
            group["lr"] = lr
        report.lr_trace.append(lr)

        model.train()
        order = rng.permutation(len(train_data))
        total, count = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            imgs = train_data.images[idx]
            if epoch == 1 and i == 0:
                # pre-augmentation hash: certifies identical data order across runs
                report.first_batch_hash = _hash_array(imgs)
            masks = train_data.masks[idx] if train_data.masks is not None else None
            imgs, masks = _augment_batch(imgs, masks, cfg, epoch, idx)

            if cfg.task == "classify":
                target_arr = train_data.labels[idx][:, None].astype(np.float32)
            elif cfg.task == "segment":
                target_arr = masks.astype(np.float32)
            if cfg.mix != "none" and len(idx) >= 2 and cfg.task in ("classify", "segment"):
                mode = cfg.mix
                if mode == "both":
                    mode = "mixup" if rng.random() < 0.5 else "cutmix"
                mixer, alpha = (
                    (mixup, cfg.mix_alpha_mixup) if mode == "mixup"
                    else (cutmix, cfg.mix_alpha_cutmix)
                )
                mixed = mixer(imgs, target_arr, alpha, rng)
                imgs = mixed.images
                if cfg.task == "classify":
                    target = torch.from_numpy(mixed.labels[:, 0].astype(np.float32))
                else:
                    target = torch.from_numpy(mixed.labels.astype(np.float32))
            elif cfg.task == "segment":
                target = torch.from_numpy(target_arr)
            else:
                target = _make_target(train_data, idx, cfg.task)

            xb = _standardize(torch.from_numpy(imgs.astype(np.float32)))
            loss = _batch_loss(model, xb, target, cfg.task, cfg.loss)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite training loss at epoch {epoch} (lr={lr:.2e}); "
                    "lower lr0 or check the input ranges"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)

        report.train_losses.append(total / count)
        val_loss = _val_loss(model, val_data, cfg.task, cfg)
        report.val_losses.append(val_loss)

        improved, should_stop = stopper.update(epoch, val_loss)
        if improved:
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if should_stop:
            break

    report.best_epoch = stopper.best_epoch
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    report.metrics = evaluate(model, val_data, cfg.task)
    report.wall_clock_s = time.time() - start

    history = [
        {"epoch": e + 1, "train_loss": tl, "val_loss": vl, "lr": lr}
        for e, (tl, vl, lr) in enumerate(
            zip(report.train_losses, report.val_losses, report.lr_trace)
        )
    ]
    ckpt = checkpoint_from_model(model, history=history, epoch=report.best_epoch)
    return ckpt, report


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

def crossval(
    models_builder: Callable[[], torch.nn.Module],
    manifest: DatasetManifest,
    cfg: TrainConfig,
    k: int = 5,
    side: Optional[int] = None,
) -> tuple[list[RunReport], MetricReport]:
    """One fit per patient-disjoint fold; pooled metrics are mean +- std."""
    from .dataio import kfold_patient

    folds = kfold_patient(manifest, k=k, seed=cfg.seed)
    reports: list[RunReport] = []
    for i, (train_m, val_m) in enumerate(folds):
        torch.manual_seed(cfg.seed)
        model = models_builder()
        input_side = side or model.config.input_side
        train_data = load_arrays(train_m, cfg.task, input_side)
        val_data = load_arrays(val_m, cfg.task, input_side)
        try:
            _, rep = fit(model, train_data, val_data, cfg)
            rep.name = f"fold{i}"
        except Exception as e:
            rep = RunReport(config={"task": cfg.task}, name=f"fold{i} FAILED: {e}")
        reports.append(rep)

    pooled = MetricReport(task=cfg.task)
    keys: set[str] = set()
    for rep in reports:
        if rep.metrics is not None:
            keys.update(rep.metrics.scalars)
    for key in sorted(keys):
        vals = [
            rep.metrics.scalars[key]
            for rep in reports
            if rep.metrics is not None and key in rep.metrics.scalars
        ]
        pooled.scalars[key] = float(np.mean(vals))
        pooled.scalars[key + "_std"] = float(np.std(vals))
    return reports, pooled


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

# atoms composable with '+': "selfatt+attgate+mixup"
ABLATION_ATOMS = {
    "base": {},
    "cutmix": {"mix": "cutmix"},
    "mixup": {"mix": "mixup"},
    "attgate": {"use_attgate": True},
    "selfatt": {"use_selfatt": True},
    "cbam": {"use_cbam": True},
    "no_cbam": {"use_cbam": False},
    "no_mix": {"mix": "none"},
    "bce": {"classification_mode": "bce"},
    "focal": {"classification_mode": "focal"},
}

_MODEL_KEYS = {"use_attgate", "use_selfatt", "use_cbam"}
_TRAIN_KEYS = {"mix"}
_LOSS_KEYS = {"classification_mode"}


def resolve_toggle(name: str) -> dict:
    """Parse a '+'-joined toggle name into config overrides; unknown atoms fail fast."""
    overrides: dict = {}
    for atom in name.split("+"):
        atom = atom.strip()
        if atom not in ABLATION_ATOMS:
            raise ValueError(f"unknown ablation toggle {atom!r} in {name!r}")
        overrides.update(ABLATION_ATOMS[atom])
    return overrides


def _apply_overrides(model_cfg: ModelConfig, train_cfg: TrainConfig, overrides: dict):
    mc = {k: v for k, v in overrides.items() if k in _MODEL_KEYS}
    tc = {k: v for k, v in overrides.items() if k in _TRAIN_KEYS}
    lc = {k: v for k, v in overrides.items() if k in _LOSS_KEYS}
    new_model = replace(model_cfg, **mc) if mc else model_cfg
    new_train = replace(train_cfg, **tc) if tc else train_cfg
    if lc:
        new_train = replace(new_train, loss=replace(train_cfg.loss, **lc))
    return new_model, new_train


def ablate(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    toggles: Sequence[str],
    train_data: ArraySet,
    val_data: ArraySet,
) -> list[RunReport]:
    """Run the base config plus each named override with a shared seed and
    identical data order; rows come back in input order, base first."""
    rows = [("base", {})]
    rows += [(name, resolve_toggle(name)) for name in toggles]  # validate all up front

    reports = []
    for name, overrides in rows:
        mc, tc = _apply_overrides(model_cfg, train_cfg, overrides)
        torch.manual_seed(tc.seed)
        model = build_model(mc)
        _, rep = fit(model, train_data, val_data, tc)
        rep.name = name
        reports.append(rep)
    return reports


def format_ablation_table(reports: Sequence[RunReport]) -> str:
    """Render run rows as a fixed-width metric table."""
    keys: list[str] = []
    for rep in reports:
        if rep.metrics is not None:
            for key in rep.metrics.scalars:
                if not key.endswith("_std") and key not in keys and key != "threshold":
                    keys.append(key)
    header = ["config"] + keys
    lines = ["  ".join(f"{h:>14}" for h in header)]
    for rep in reports:
        cells = [rep.name or "?"]
        for key in keys:
            v = rep.metrics.scalars.get(key, float("nan")) if rep.metrics else float("nan")
            cells.append(f"{v:.4f}")
        lines.append("  ".join(f"{c:>14}" for c in cells))
    return "\n".join(lines)
