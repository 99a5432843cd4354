"""Model construction: attention blocks, backbone encoders, decoders, and the
three task builders with their shape contracts."""
from .attention import CBAM, AttentionGate, SelfAttention2d
from .models import (
    BACKBONES,
    Checkpoint,
    ModelConfig,
    build_classifier,
    build_from_checkpoint,
    build_model,
    build_segmenter,
    build_subtyper,
    default_config,
    export_torchscript,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "BACKBONES",
    "CBAM",
    "AttentionGate",
    "SelfAttention2d",
    "Checkpoint",
    "ModelConfig",
    "build_classifier",
    "build_from_checkpoint",
    "build_model",
    "build_segmenter",
    "build_subtyper",
    "default_config",
    "export_torchscript",
    "load_checkpoint",
    "save_checkpoint",
]
