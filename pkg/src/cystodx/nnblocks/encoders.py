"""Backbone encoders emitting feature pyramids. All are parameterized by a
width multiplier so toy-scale graphs keep the full topology."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def scaled(channels: int, width_mult: float, floor: int = 4) -> int:
    return max(floor, int(round(channels * width_mult)))


class ConvBNReLU(nn.Sequential):
    def __init__(self, cin, cout, k=3, stride=1, groups=1, act=True):
        layers = [
            nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, groups=groups, bias=False),
            nn.BatchNorm2d(cout),
        ]
        if act:
            layers.append(nn.ReLU(inplace=True))
        super().__init__(*layers)


class DoubleConv(nn.Sequential):
    """Two 3x3 conv+BN+ReLU blocks; the vanilla UNet building unit."""

    def __init__(self, cin, cout):
        super().__init__(ConvBNReLU(cin, cout), ConvBNReLU(cout, cout))


# ---------------------------------------------------------------------------
# plain (vanilla UNet-style) encoder
# ---------------------------------------------------------------------------

class PlainEncoder(nn.Module):
    """Double-conv pyramid at strides 1/2/4/8/16."""

    def __init__(self, width_mult: float = 1.0, in_channels: int = 3):
        super().__init__()
        widths = [scaled(c, width_mult) for c in (64, 128, 256, 512, 1024)]
        self.channels = widths
        self.reductions = [1, 2, 4, 8, 16]
        stages = [DoubleConv(in_channels, widths[0])]
        for i in range(1, 5):
            stages.append(nn.Sequential(nn.MaxPool2d(2), DoubleConv(widths[i - 1], widths[i])))
        self.stages = nn.ModuleList(stages)

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


# ---------------------------------------------------------------------------
# residual encoders (34/50 shapes)
# ---------------------------------------------------------------------------

class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = ConvBNReLU(cin, cout, stride=stride)
        self.conv2 = ConvBNReLU(cout, cout, act=False)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = ConvBNReLU(cin, cout, k=1, stride=stride, act=False)

    def forward(self, x):
        identity = x if self.down is None else self.down(x)
        out = self.conv2(self.conv1(x))
        return F.relu(out + identity)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, cmid, stride=1):
        super().__init__()
        cout = cmid * self.expansion
        self.conv1 = ConvBNReLU(cin, cmid, k=1)
        self.conv2 = ConvBNReLU(cmid, cmid, stride=stride)
        self.conv3 = ConvBNReLU(cmid, cout, k=1, act=False)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = ConvBNReLU(cin, cout, k=1, stride=stride, act=False)

    def forward(self, x):
        identity = x if self.down is None else self.down(x)
        out = self.conv3(self.conv2(self.conv1(x)))
        return F.relu(out + identity)


_RESNET_SHAPES = {
    "resnet34": (BasicBlock, (3, 4, 6, 3)),
    "resnet50": (Bottleneck, (3, 4, 6, 3)),
}


class ResNetEncoder(nn.Module):
    """Residual pyramid at strides 2/4/8/16/32."""

    def __init__(self, arch: str = "resnet34", width_mult: float = 1.0, in_channels: int = 3):
        super().__init__()
        block, depths = _RESNET_SHAPES[arch]
        base = [scaled(c, width_mult) for c in (64, 64, 128, 256, 512)]
        self.arch = arch

        stem = nn.Sequential(
            nn.Conv2d(in_channels, base[0], 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(base[0]),
            nn.ReLU(inplace=True),
        )
        stages = [stem]
        cin = base[0]
        for i, depth in enumerate(depths):
            layers = []
            if i == 0:
                layers.append(nn.MaxPool2d(3, stride=2, padding=1))
            for j in range(depth):
                stride = 2 if (i > 0 and j == 0) else 1
                layers.append(block(cin, base[i + 1], stride=stride))
                cin = base[i + 1] * block.expansion
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)
        self.channels = [base[0]] + [base[i + 1] * block.expansion for i in range(4)]
        self.reductions = [2, 4, 8, 16, 32]

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


# ---------------------------------------------------------------------------
# compound-scaled mobile encoder (B0 shape)
# ---------------------------------------------------------------------------

class SqueezeExcite(nn.Module):
    def __init__(self, channels, squeezed):
        super().__init__()
        self.reduce = nn.Conv2d(channels, squeezed, 1)
        self.expand = nn.Conv2d(squeezed, channels, 1)

    def forward(self, x):
        s = F.adaptive_avg_pool2d(x, 1)
        s = torch.sigmoid(self.expand(F.silu(self.reduce(s))))
        return x * s


class MBConv(nn.Module):
    """Inverted residual with depthwise conv and squeeze-excitation."""

    def __init__(self, cin, cout, expand, kernel, stride):
        super().__init__()
        mid = cin * expand
        layers = []
        if expand != 1:
            layers.append(ConvBNReLU(cin, mid, k=1, act=False))
            layers.append(nn.SiLU(inplace=True))
        layers.append(ConvBNReLU(mid, mid, k=kernel, stride=stride, groups=mid, act=False))
        layers.append(nn.SiLU(inplace=True))
        layers.append(SqueezeExcite(mid, max(1, cin // 4)))
        layers.append(ConvBNReLU(mid, cout, k=1, act=False))
        self.block = nn.Sequential(*layers)
        self.residual = stride == 1 and cin == cout

    def forward(self, x):
        out = self.block(x)
        return x + out if self.residual else out


# (expand, channels, repeats, stride, kernel) for the seven B0 stages
_B0_STAGES = (
    (1, 16, 1, 1, 3),
    (6, 24, 2, 2, 3),
    (6, 40, 2, 2, 5),
    (6, 80, 3, 2, 3),
    (6, 112, 3, 1, 5),
    (6, 192, 4, 2, 5),
    (6, 320, 1, 1, 3),
)


class EfficientNetB0Encoder(nn.Module):
    """MBConv stack with the published B0 stage layout; pyramid taps at
    strides 2/4/8/16/32 (stages 1, 2, 3, 5, 7)."""

    pyramid_taps = (1, 2, 3, 5, 7)  # stage indices counting the stem as 0

    def __init__(self, width_mult: float = 1.0, in_channels: int = 3):
        super().__init__()
        stem_c = scaled(32, width_mult)
        stem = nn.Sequential(
            ConvBNReLU(in_channels, stem_c, k=3, stride=2, act=False), nn.SiLU(inplace=True)
        )
        stages = [stem]
        cin = stem_c
        all_channels = [stem_c]
        for expand, cout, repeats, stride, kernel in _B0_STAGES:
            cout = scaled(cout, width_mult)
            blocks = []
            for j in range(repeats):
                blocks.append(MBConv(cin, cout, expand, kernel, stride if j == 0 else 1))
                cin = cout
            stages.append(nn.Sequential(*blocks))
            all_channels.append(cout)
        self.stages = nn.ModuleList(stages)
        self.head_channels = scaled(1280, width_mult)
        self.head = nn.Sequential(
            ConvBNReLU(cin, self.head_channels, k=1, act=False), nn.SiLU(inplace=True)
        )
        self.all_channels = all_channels
        self.channels = [all_channels[i] for i in self.pyramid_taps]
        self.reductions = [2, 4, 8, 16, 32]

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i in self.pyramid_taps:
                feats.append(x)
        return feats

    def forward_all(self, x) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


# ---------------------------------------------------------------------------
# ConvNeXt-Tiny shape
# ---------------------------------------------------------------------------

class LayerNorm2d(nn.LayerNorm):
    """LayerNorm over the channel dim of NCHW tensors."""

    def forward(self, x):
        x = x.permute(0, 2, 3, 1)
        x = super().forward(x)
        return x.permute(0, 3, 1, 2)


class ConvNeXtBlock(nn.Module):
    def __init__(self, channels, layer_scale_init=1e-6):
        super().__init__()
        self.dwconv = nn.Conv2d(channels, channels, 7, padding=3, groups=channels)
        self.norm = nn.LayerNorm(channels)
        self.pw1 = nn.Linear(channels, channels * 4)
        self.pw2 = nn.Linear(channels * 4, channels)
        self.gamma = nn.Parameter(layer_scale_init * torch.ones(channels))

    def forward(self, x):
        shortcut = x
        x = self.dwconv(x).permute(0, 2, 3, 1)
        x = self.pw2(F.gelu(self.pw1(self.norm(x))))
        x = (self.gamma * x).permute(0, 3, 1, 2)
        return shortcut + x


class ConvNeXtTinyEncoder(nn.Module):
    """Stage depths 3/3/9/3 at widths 96/192/384/768; stride-4 patchify stem."""

    def __init__(self, width_mult: float = 1.0, in_channels: int = 3):
        super().__init__()
        widths = [scaled(c, width_mult) for c in (96, 192, 384, 768)]
        depths = (3, 3, 9, 3)
        stages = []
        for i, (w, d) in enumerate(zip(widths, depths)):
            layers = []
            if i == 0:
                layers.append(nn.Conv2d(in_channels, w, 4, stride=4))
                layers.append(LayerNorm2d(w))
            else:
                layers.append(LayerNorm2d(widths[i - 1]))
                layers.append(nn.Conv2d(widths[i - 1], w, 2, stride=2))
            layers.extend(ConvNeXtBlock(w) for _ in range(d))
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)
        self.channels = widths
        self.reductions = [4, 8, 16, 32]
        self.norm = nn.LayerNorm(widths[-1])

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def make_encoder(backbone: str, width_mult: float = 1.0):
    if backbone == "plain":
        return PlainEncoder(width_mult)
    if backbone in _RESNET_SHAPES:
        return ResNetEncoder(backbone, width_mult)
    if backbone == "efficientnet_b0":
        return EfficientNetB0Encoder(width_mult)
    if backbone == "convnext_tiny":
        return ConvNeXtTinyEncoder(width_mult)
    raise ValueError(f"unknown backbone {backbone!r}")
