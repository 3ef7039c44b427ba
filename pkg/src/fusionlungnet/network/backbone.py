"""Four-stage residual encoders (strides 4, 8, 16, 32)."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .blocks import ConvBNReLU, ShapeError

RESNET50_CHANNELS = (256, 512, 1024, 2048)
TINY_CHANNELS = (16, 32, 64, 128)

# per-variant defaults for the head widths; None in BackboneConfig picks these
_DEFAULT_WIDTHS = {
    "resnet50": {"fuse_channels": 256, "decoder_channels": 64, "rrm_channels": 64},
    "tiny": {"fuse_channels": 16, "decoder_channels": 16, "rrm_channels": 8},
}


@dataclass
class BackboneConfig:
    variant: str = "resnet50"
    pretrained: bool = False
    stage_channels: tuple[int, ...] | None = None
    fuse_channels: int | None = None
    decoder_channels: int | None = None
    rrm_channels: int | None = None

    def __post_init__(self):
        if self.variant not in _DEFAULT_WIDTHS:
            raise ValueError(f"unknown backbone variant {self.variant!r}")
        if self.stage_channels is None:
            self.stage_channels = RESNET50_CHANNELS if self.variant == "resnet50" else TINY_CHANNELS
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) != 4:
            raise ValueError("stage_channels needs exactly 4 entries")
        if self.variant == "resnet50" and self.stage_channels != RESNET50_CHANNELS:
            raise ValueError(f"resnet50 stage channels are fixed at {RESNET50_CHANNELS}")
        if self.variant == "tiny":
            if min(self.stage_channels) < 8:
                raise ValueError("tiny stage channels must each be >= 8")
            if self.pretrained:
                raise ValueError("the tiny backbone has no pretrained weights")
        for key, value in _DEFAULT_WIDTHS[self.variant].items():
            if getattr(self, key) is None:
                setattr(self, key, value)


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + identity)


class TinyEncoder(nn.Module):
    """Small from-scratch encoder for CPU-scale runs and gradient checks."""

    def __init__(self, stage_channels=TINY_CHANNELS, in_ch=3):
        super().__init__()
        c = list(stage_channels)
        self.stem = nn.Sequential(
            ConvBNReLU(in_ch, c[0], 3, stride=2),
            ConvBNReLU(c[0], c[0], 3, stride=2),
        )
        self.stages = nn.ModuleList(
            [BasicBlock(c[0], c[0])] + [BasicBlock(c[i - 1], c[i], stride=2) for i in range(1, 4)]
        )

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class ResNet50Encoder(nn.Module):
    IMAGENET_MEAN = (0.485, 0.456, 0.406)
    IMAGENET_STD = (0.229, 0.224, 0.225)

    def __init__(self, pretrained=False, load_weights=True):
        super().__init__()
        from torchvision.models import ResNet50_Weights, resnet50

        weights = ResNet50_Weights.IMAGENET1K_V1 if pretrained and load_weights else None
        net = resnet50(weights=weights)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.stages = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
        self.normalize_input = pretrained
        self.register_buffer("mean", torch.tensor(self.IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(self.IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    def forward(self, x):
        if self.normalize_input:
            x = (x - self.mean) / self.std
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def build_encoder(cfg: BackboneConfig, load_weights=True) -> nn.Module:
    """``load_weights=False`` skips fetching pretrained weights (they are about
    to be overwritten from a checkpoint)."""
    if cfg.variant == "resnet50":
        return ResNet50Encoder(pretrained=cfg.pretrained, load_weights=load_weights)
    return TinyEncoder(cfg.stage_channels)


def check_input_shape(x: torch.Tensor) -> None:
    if x.dim() != 4:
        raise ShapeError(f"expected [B, C, H, W], got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % 32 or w % 32:
        raise ShapeError(f"spatial dims must be divisible by 32, got {h}x{w}")


def encode(x: torch.Tensor, encoder: nn.Module) -> list[torch.Tensor]:
    check_input_shape(x)
    return encoder(x)
