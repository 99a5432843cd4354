"""Task models (classifier, segmenter, subtyper), their builders, and
checkpoint persistence/export."""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import CBAM, SelfAttention2d
from .decoders import UNetDecoder, UNetPPDecoder
from .encoders import (
    ConvNeXtTinyEncoder,
    EfficientNetB0Encoder,
    make_encoder,
)

TASKS = ("classify", "segment", "subtype")
BACKBONES = ("plain", "resnet34", "resnet50", "efficientnet_b0", "convnext_tiny")
DECODERS = ("unet", "unetpp", "none")


@dataclass
class ModelConfig:
    task: str
    backbone: str = "efficientnet_b0"
    use_cbam: bool = False
    use_attgate: bool = False
    use_selfatt: bool = False
    decoder: str = "none"
    heads: int = 1
    dropout: float = 0.0
    pretrained: bool = False
    width_mult: float = 1.0
    input_side: int = 512
    sa_token_budget: int = 4096

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.decoder not in DECODERS:
            raise ValueError(f"unknown decoder {self.decoder!r}")
        if self.task == "segment" and self.decoder == "none":
            raise ValueError("segmentation requires a decoder")
        if self.task == "subtype" and self.heads != 3:
            raise ValueError("subtyping predicts exactly 3 markers")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def default_config(task: str, toy: bool = False) -> ModelConfig:
    """Paper-default architecture per task; toy mode shrinks widths and input."""
    width = 0.125 if toy else 1.0
    side = 64 if toy else 512
    if task == "classify":
        return ModelConfig(task, backbone="efficientnet_b0", use_cbam=True,
                           width_mult=width, input_side=side)
    if task == "segment":
        return ModelConfig(task, backbone="resnet34", decoder="unetpp",
                           use_attgate=True, use_selfatt=True,
                           width_mult=width, input_side=side)
    if task == "subtype":
        return ModelConfig(task, backbone="convnext_tiny", heads=3, dropout=0.3,
                           width_mult=width, input_side=side)
    raise ValueError(f"unknown task {task!r}")


class Classifier(nn.Module):
    """Backbone (optionally CBAM-augmented after each stage) -> GAP -> logit."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.backbone == "convnext_tiny":
            raise ValueError("use the subtype builder for the convnext backbone")
        self.config = cfg
        encoder = make_encoder(cfg.backbone, cfg.width_mult)
        stages = []
        if isinstance(encoder, EfficientNetB0Encoder):
            raw = list(encoder.stages) + [encoder.head]
            chans = encoder.all_channels + [encoder.head_channels]
            feat_dim = encoder.head_channels
        else:
            raw = list(encoder.stages)
            chans = encoder.channels
            feat_dim = encoder.channels[-1]
        for stage, c in zip(raw, chans):
            if cfg.use_cbam:
                stages.append(nn.Sequential(stage, CBAM(c)))
            else:
                stages.append(stage)
        self.stages = nn.ModuleList(stages)
        self.dropout = nn.Dropout(cfg.dropout)
        self.fc = nn.Linear(feat_dim, cfg.heads)

    def conv_stages(self) -> "OrderedDict[str, nn.Module]":
        return OrderedDict((f"stage{i}", s) for i, s in enumerate(self.stages))

    def forward(self, x):
        for stage in self.stages:
            x = stage(x)
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.fc(self.dropout(x))

    def predict_proba(self, x):
        return torch.sigmoid(self.forward(x))


class Segmenter(nn.Module):
    """Pyramid encoder, optional self-attention at the deepest stage, UNet or
    nested decoder with optional gated skips, 1x1 head to per-pixel logits."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.backbone == "convnext_tiny":
            raise ValueError(
                "convnext's stride-4 stem does not form the 2x pyramid the "
                "decoders expect; use plain/resnet/efficientnet backbones"
            )
        self.config = cfg
        self.encoder = make_encoder(cfg.backbone, cfg.width_mult)
        self.selfatt = (
            SelfAttention2d(self.encoder.channels[-1], cfg.sa_token_budget)
            if cfg.use_selfatt
            else None
        )
        decoder_cls = {"unet": UNetDecoder, "unetpp": UNetPPDecoder}[cfg.decoder]
        self.decoder = decoder_cls(self.encoder.channels, use_attgate=cfg.use_attgate)
        self.head = nn.Conv2d(self.decoder.out_channels, 1, 1)
        self.final_up = self.encoder.reductions[0]

    def conv_stages(self) -> "OrderedDict[str, nn.Module]":
        return OrderedDict((f"stage{i}", s) for i, s in enumerate(self.encoder.stages))

    def forward(self, x):
        size = x.shape[2:]
        feats = self.encoder(x)
        if self.selfatt is not None:
            feats[-1] = self.selfatt(feats[-1])
        out = self.head(self.decoder(feats))
        if self.final_up != 1:
            out = F.interpolate(out, size=size, mode="bilinear", align_corners=False)
        return out

    def predict_proba(self, x):
        return torch.sigmoid(self.forward(x))


class Subtyper(nn.Module):
    """ConvNeXt-Tiny-shaped backbone, dropout, one independent logit per marker."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.encoder = ConvNeXtTinyEncoder(cfg.width_mult)
        self.dropout = nn.Dropout(cfg.dropout)
        self.fc = nn.Linear(self.encoder.channels[-1], cfg.heads)

    def conv_stages(self) -> "OrderedDict[str, nn.Module]":
        return OrderedDict((f"stage{i}", s) for i, s in enumerate(self.encoder.stages))

    def forward(self, x):
        feats = self.encoder(x)
        x = feats[-1].mean(dim=(2, 3))
        x = self.encoder.norm(x)
        return self.fc(self.dropout(x))

    def predict_proba(self, x):
        return torch.sigmoid(self.forward(x))


def _seed_if_given(seed: Optional[int]):
    if seed is not None:
        torch.manual_seed(seed)


def build_classifier(cfg: ModelConfig, seed: Optional[int] = None) -> Classifier:
    if cfg.task != "classify":
        raise ValueError(f"config task is {cfg.task!r}, expected 'classify'")
    _seed_if_given(seed)
    model = Classifier(cfg)
    if cfg.pretrained:
        load_pretrained_backbone(model, cfg)
    return model


def build_segmenter(cfg: ModelConfig, seed: Optional[int] = None) -> Segmenter:
    if cfg.task != "segment":
        raise ValueError(f"config task is {cfg.task!r}, expected 'segment'")
    _seed_if_given(seed)
    model = Segmenter(cfg)
    if cfg.pretrained:
        load_pretrained_backbone(model, cfg)
    return model


def build_subtyper(cfg: ModelConfig, seed: Optional[int] = None) -> Subtyper:
    if cfg.task != "subtype":
        raise ValueError(f"config task is {cfg.task!r}, expected 'subtype'")
    _seed_if_given(seed)
    model = Subtyper(cfg)
    if cfg.pretrained:
        load_pretrained_backbone(model, cfg)
    return model


def build_model(cfg: ModelConfig, seed: Optional[int] = None) -> nn.Module:
    return {
        "classify": build_classifier,
        "segment": build_segmenter,
        "subtype": build_subtyper,
    }[cfg.task](cfg, seed)


def load_pretrained_backbone(model: nn.Module, cfg: ModelConfig) -> None:
    """Best-effort import of torchvision reference weights into the encoder.

    Requires width_mult == 1 and network access to the weight hub; tensors are
    matched positionally by shape across the encoder parameter list.
    """
    if cfg.width_mult != 1.0:
        raise ValueError("pretrained weights require width_mult = 1.0")
    try:
        import torchvision.models as tvm

        ref = {
            "resnet34": tvm.resnet34,
            "resnet50": tvm.resnet50,
            "efficientnet_b0": tvm.efficientnet_b0,
            "convnext_tiny": tvm.convnext_tiny,
        }[cfg.backbone](weights="DEFAULT")
    except Exception as e:  # download failure, missing arch, no torchvision
        raise RuntimeError(f"cannot source pretrained weights for {cfg.backbone}: {e}") from e

    target = model.encoder if hasattr(model, "encoder") else model
    src = [t for t in ref.state_dict().values() if t.ndim > 0]
    copied = 0
    with torch.no_grad():
        for name, param in list(target.state_dict().items()):
            while src and src[0].shape != param.shape:
                src.pop(0)
            if not src:
                break
            param.copy_(src.pop(0))
            copied += 1
    if copied == 0:
        raise RuntimeError(f"no compatible tensors found for backbone {cfg.backbone}")


# ---------------------------------------------------------------------------
# checkpointing and export
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    state_dict: dict
    history: list = field(default_factory=list)
    epoch: int = 0


def checkpoint_from_model(model: nn.Module, history: Optional[list] = None, epoch: int = 0) -> Checkpoint:
    sd = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(config=model.config, state_dict=sd, history=history or [], epoch=epoch)


def save_checkpoint(ckpt: Checkpoint, dirpath) -> Path:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    torch.save(ckpt.state_dict, d / "weights.pt")
    with open(d / "config.json", "w") as f:
        json.dump(asdict(ckpt.config), f, indent=2)
    with open(d / "history.json", "w") as f:
        json.dump({"epoch": ckpt.epoch, "history": ckpt.history}, f, indent=2)
    return d


def load_checkpoint(dirpath) -> Checkpoint:
    d = Path(dirpath)
    with open(d / "config.json") as f:
        cfg = ModelConfig.from_dict(json.load(f))
    state = torch.load(d / "weights.pt", map_location="cpu", weights_only=True)
    with open(d / "history.json") as f:
        meta = json.load(f)
    return Checkpoint(config=cfg, state_dict=state, history=meta["history"], epoch=meta["epoch"])


def build_from_checkpoint(ckpt: Checkpoint) -> nn.Module:
    cfg = ckpt.config
    if cfg.pretrained:
        # weights come from the checkpoint; skip the hub fetch on rebuild
        from dataclasses import replace

        cfg = replace(cfg, pretrained=False)
    model = build_model(cfg)
    model.config = ckpt.config
    model.load_state_dict(ckpt.state_dict)
    model.eval()
    return model


def export_torchscript(ckpt: Checkpoint, path) -> Path:
    """Trace the model into a portable serialized graph loadable without this package."""
    model = build_from_checkpoint(ckpt)
    example = torch.zeros(1, 3, ckpt.config.input_side, ckpt.config.input_side)
    with torch.no_grad():
        traced = torch.jit.trace(model, example)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    traced.save(str(path))
    return path
