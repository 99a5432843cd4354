"""Segmentation decoders: classic UNet and the nested dense-skip variant."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import AttentionGate
from .encoders import DoubleConv


def _up_to(x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, size=ref.shape[2:], mode="bilinear", align_corners=False)


class UNetDecoder(nn.Module):
    """Classic expanding path: upsample, concatenate the (optionally gated)
    skip, double-conv. Consumes a 5-level pyramid, emits a level-0 feature map."""

    def __init__(self, channels: list[int], use_attgate: bool = False):
        super().__init__()
        self.levels = len(channels)
        self.blocks = nn.ModuleList()
        self.gates = nn.ModuleDict()
        for i in range(self.levels - 2, -1, -1):
            self.blocks.append(DoubleConv(channels[i] + channels[i + 1], channels[i]))
            if use_attgate:
                self.gates[f"g{i}"] = AttentionGate(channels[i + 1], channels[i])
        self.out_channels = channels[0]

    def forward(self, feats: list[torch.Tensor]) -> torch.Tensor:
        x = feats[-1]
        for step, i in enumerate(range(self.levels - 2, -1, -1)):
            skip = feats[i]
            if f"g{i}" in self.gates:
                skip = self.gates[f"g{i}"](x, skip)
            x = self.blocks[step](torch.cat([skip, _up_to(x, skip)], dim=1))
        return x


class UNetPPDecoder(nn.Module):
    """Nested dense skip pathway: node (i, j) consumes the upsampled (i+1, j-1)
    output concatenated with all (i, 0..j-1) outputs at its own level."""

    def __init__(self, channels: list[int], use_attgate: bool = False):
        super().__init__()
        self.levels = len(channels)
        self.nodes = nn.ModuleDict()
        self.gates = nn.ModuleDict()
        for j in range(1, self.levels):
            for i in range(self.levels - j):
                cin = j * channels[i] + channels[i + 1]
                self.nodes[f"n{i}_{j}"] = DoubleConv(cin, channels[i])
                if use_attgate:
                    for l in range(j):
                        self.gates[f"g{i}_{j}_{l}"] = AttentionGate(channels[i + 1], channels[i])
        self.out_channels = channels[0]

    def forward(self, feats: list[torch.Tensor]) -> torch.Tensor:
        grid: dict[tuple[int, int], torch.Tensor] = {
            (i, 0): f for i, f in enumerate(feats)
        }
        for j in range(1, self.levels):
            for i in range(self.levels - j):
                gating = grid[(i + 1, j - 1)]
                skips = []
                for l in range(j):
                    s = grid[(i, l)]
                    key = f"g{i}_{j}_{l}"
                    if key in self.gates:
                        s = self.gates[key](gating, s)
                    skips.append(s)
                skips.append(_up_to(gating, skips[0]))
                grid[(i, j)] = self.nodes[f"n{i}_{j}"](torch.cat(skips, dim=1))
        return grid[(0, self.levels - 1)]
