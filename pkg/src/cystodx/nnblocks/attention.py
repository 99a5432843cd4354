"""Attention blocks: CBAM, additive attention gates, and 2-D self-attention."""
from __future__ import annotations

import warnings

import torch
import torch.nn as nn
import torch.nn.functional as F


class ChannelAttention(nn.Module):
    """Shared-MLP channel attention over global average- and max-pooled maps."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if channels < reduction:
            warnings.warn(f"channel count {channels} < reduction {reduction}; clamping")
            reduction = channels
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1, bias=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1, bias=False),
        )

    def forward(self, x):
        avg = self.mlp(F.adaptive_avg_pool2d(x, 1))
        mx = self.mlp(F.adaptive_max_pool2d(x, 1))
        return torch.sigmoid(avg + mx)


class SpatialAttention(nn.Module):
    """7x7 conv over the channel-mean/channel-max planes."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def forward(self, x):
        avg = x.mean(dim=1, keepdim=True)
        mx = x.max(dim=1, keepdim=True).values
        return torch.sigmoid(self.conv(torch.cat([avg, mx], dim=1)))


class CBAM(nn.Module):
    """Channel attention then spatial attention, both multiplicative."""

    def __init__(self, channels: int, reduction: int = 16, kernel_size: int = 7):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(kernel_size)

    def forward(self, x):
        x = x * self.channel(x)
        x = x * self.spatial(x)
        return x


class AttentionGate(nn.Module):
    """Additive attention on a skip connection, driven by a coarser gating signal."""

    def __init__(self, gating_channels: int, skip_channels: int, inter_channels: int | None = None):
        super().__init__()
        inter = inter_channels or max(skip_channels // 2, 1)
        self.wg = nn.Conv2d(gating_channels, inter, 1)
        self.ws = nn.Conv2d(skip_channels, inter, 1)
        self.psi = nn.Conv2d(inter, 1, 1)

    def attention(self, gating: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        if gating.shape[0] != skip.shape[0]:
            raise ValueError(
                f"batch mismatch: gating {gating.shape[0]} vs skip {skip.shape[0]}"
            )
        g = F.interpolate(gating, size=skip.shape[2:], mode="bilinear", align_corners=False)
        return torch.sigmoid(self.psi(F.relu(self.wg(g) + self.ws(skip))))

    def forward(self, gating, skip):
        return skip * self.attention(gating, skip)


class SelfAttention2d(nn.Module):
    """Dot-product self-attention over spatial positions with a zero-initialized
    residual scale, so the block is an exact identity at initialization."""

    def __init__(self, channels: int, token_budget: int = 4096):
        super().__init__()
        d = max(channels // 8, 1)
        self.query = nn.Conv2d(channels, d, 1)
        self.key = nn.Conv2d(channels, d, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.gamma = nn.Parameter(torch.zeros(1))
        self.token_budget = token_budget
        self.d = d

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q = self.query(x).reshape(b, self.d, h * w).transpose(1, 2)  # B, N, d
        k = self.key(x).reshape(b, self.d, h * w)  # B, d, N
        return torch.softmax(q @ k / self.d ** 0.5, dim=-1)  # B, N, N

    def forward(self, x):
        b, c, h, w = x.shape
        n = h * w
        if n > self.token_budget:
            raise RuntimeError(
                f"{n} spatial tokens exceed the budget of {self.token_budget}; "
                "insert the block at a deeper (more downsampled) stage"
            )
        attn = self.attention_weights(x)
        v = self.value(x).reshape(b, c, n)  # B, C, N
        out = (attn @ v.transpose(1, 2)).transpose(1, 2).reshape(b, c, h, w)
        return x + self.gamma * out
