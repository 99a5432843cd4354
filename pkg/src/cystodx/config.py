"""Declarative experiment configuration: one YAML file drives a run."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import yaml

from .augment import AugmentConfig
from .losses import LossConfig
from .nnblocks import ModelConfig, default_config
from .train import TrainConfig


@dataclass
class ExperimentConfig:
    model: ModelConfig
    train: TrainConfig
    manifest: Optional[str] = None
    out_dir: str = "runs/exp"
    toggles: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "task": self.model.task,
            "model": asdict(self.model),
            "train": asdict(self.train),
            "data": {"manifest": self.manifest},
            "out_dir": self.out_dir,
            "toggles": list(self.toggles),
        }


def experiment_from_dict(doc: dict) -> ExperimentConfig:
    task = doc.get("task", "classify")

    if "model" in doc:
        model_d = dict(doc["model"])
        model_d.setdefault("task", task)
        model = ModelConfig(**model_d)
    else:
        model = default_config(task)

    train_d = dict(doc.get("train", {}))
    train_d.setdefault("task", task)
    augment = AugmentConfig(**_tupled(train_d.pop("augment", {}),
                                      ("crop_scale", "jitter", "elastic", "grid_distort")))
    loss = LossConfig(**_tupled(train_d.pop("loss", {}), ("compound_weights",)))
    train = TrainConfig(augment=augment, loss=loss, **train_d)

    data = doc.get("data", {}) or {}
    return ExperimentConfig(
        model=model,
        train=train,
        manifest=data.get("manifest"),
        out_dir=doc.get("out_dir", "runs/exp"),
        toggles=list(doc.get("toggles", [])),
    )


def _tupled(d: dict, keys) -> dict:
    out = dict(d)
    for k in keys:
        if k in out and isinstance(out[k], list):
            out[k] = tuple(out[k])
    return out


def load_experiment_config(
    path,
    seed: Optional[int] = None,
    toy: bool = False,
    out_dir: Optional[str] = None,
) -> ExperimentConfig:
    """Parse the YAML file; CLI flags override the corresponding keys."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    with open(path) as f:
        doc = yaml.safe_load(f) or {}
    cfg = experiment_from_dict(doc)
    if seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=seed))
    if toy:
        cfg = replace(cfg, model=replace(cfg.model, width_mult=0.125, input_side=64))
    if out_dir is not None:
        cfg = replace(cfg, out_dir=out_dir)
    return cfg


def save_experiment_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)
