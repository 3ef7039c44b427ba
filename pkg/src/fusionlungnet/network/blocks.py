"""Attention, fusion, refinement and decoding blocks."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


def upsample(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def _padding(kernel_size):
    if isinstance(kernel_size, int):
        return kernel_size // 2
    return tuple(k // 2 for k in kernel_size)


class ConvBNReLU(nn.Sequential):
    def __init__(self, in_ch, out_ch, kernel_size=3, stride=1):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride, padding=_padding(kernel_size), bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )


def group_count(channels: int) -> int:
    """Largest of 32, 16, ..., 1 dividing ``channels`` with >= 4 channels per group."""
    for g in (32, 16, 8, 4, 2):
        if channels % g == 0 and channels // g >= 4:
            return g
    return 1


class ConvGNReLU(nn.Sequential):
    """Conv + GroupNorm + ReLU.

    Used wherever feature maps are multiplied together: per-sample
    normalisation keeps each factor at unit scale in train and eval mode
    alike, whereas stale batch statistics get squared by every product.
    """

    def __init__(self, in_ch, out_ch, kernel_size=3, stride=1):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride, padding=_padding(kernel_size), bias=False),
            nn.GroupNorm(group_count(out_ch), out_ch),
            nn.ReLU(inplace=True),
        )


class ChannelAggregationAttention(nn.Module):
    """Reweights the deepest encoder features channel by channel.

    ``I4 = C3x3(C1x1(x))``; the weights are the global average of
    ``C3x1(C1x3(I4))``, one scalar per (sample, channel); the output is
    ``I4 * weights``.
    """

    def __init__(self, in_ch, out_ch=256):
        super().__init__()
        self.reduce = ConvGNReLU(in_ch, out_ch, 1)
        self.spatial = ConvGNReLU(out_ch, out_ch, 3)
        self.asym = nn.Sequential(
            nn.Conv2d(out_ch, out_ch, (1, 3), padding=(0, 1)),
            nn.Conv2d(out_ch, out_ch, (3, 1), padding=(1, 0)),
        )

    def attention(self, i4):
        return self.asym(i4).mean(dim=(2, 3), keepdim=True)

    def forward(self, x, return_weights=False):
        i4 = self.spatial(self.reduce(x))
        weights = self.attention(i4)
        out = i4 * weights
        if return_weights:
            return out, weights
        return out


class MultiScaleFusion(nn.Module):
    """Fuses three feature maps at the resolution of the middle (encoder) input.

    Each input gets its own 3x3 projection to ``width`` channels (after
    upsampling for ``i1``/``i3``); the three pairwise products are stacked and
    merged by a final 3x3 convolution.
    """

    def __init__(self, in1, in2, in3, width=256):
        super().__init__()
        self.proj1 = ConvGNReLU(in1, width, 3)
        self.proj2 = ConvGNReLU(in2, width, 3)
        self.proj3 = ConvGNReLU(in3, width, 3)
        self.fuse = ConvGNReLU(3 * width, width, 3)

    def pairwise(self, i1, i2, i3):
        if not (i1.shape[0] == i2.shape[0] == i3.shape[0]):
            raise ShapeError(
                f"batch sizes differ: {i1.shape[0]}, {i2.shape[0]}, {i3.shape[0]}"
            )
        size = i2.shape[-2:]
        a = self.proj1(upsample(i1, size))
        b = self.proj2(i2)
        c = self.proj3(upsample(i3, size))
        return a * b, a * c, b * c

    def forward(self, i1, i2, i3):
        return self.fuse(torch.cat(self.pairwise(i1, i2, i3), dim=1))


class SelfRefinement(nn.Module):
    """Compress to ``width`` channels, expand to ``2 * width``, split into a
    multiplicative and an additive half: ``relu(f1 * fm + fc)``."""

    def __init__(self, in_ch, width=256):
        super().__init__()
        self.width = width
        self.compress = ConvGNReLU(in_ch, width, 3)
        self.expand = nn.Conv2d(width, 2 * width, 3, padding=1)

    def forward(self, x):
        f1 = self.compress(x)
        fm, fc = self.expand(f1).split(self.width, dim=1)
        return F.relu(f1 * fm + fc)


class DecoderStage(nn.Module):
    def __init__(self, lateral_ch, deeper_ch, width):
        super().__init__()
        self.conv = nn.Sequential(
            ConvGNReLU(lateral_ch + deeper_ch, width, 3),
            ConvGNReLU(width, width, 3),
        )
        self.head = nn.Conv2d(width, 1, 1)

    def forward(self, lateral, deeper=None, with_head=True):
        if deeper is not None:
            lateral = torch.cat([lateral, upsample(deeper, lateral.shape[-2:])], dim=1)
        d = self.conv(lateral)
        return d, (self.head(d) if with_head else None)


class ResidualRefinement(nn.Module):
    """Residual encoder-decoder that corrects a coarse logit map.

    Encoder: a 3x3 entry conv, then five conv layers separated by four 2x
    max-pools. Decoder: bilinear upsampling with shortcut concatenation from
    the matching encoder level, then a 1x1 head producing the residual.
    """

    def __init__(self, in_ch=4, width=64):
        super().__init__()
        self.entry = nn.Conv2d(in_ch, width, 3, padding=1)
        self.enc = nn.ModuleList([ConvBNReLU(width, width, 3) for _ in range(5)])
        self.pool = nn.MaxPool2d(2, 2, ceil_mode=True)
        self.dec = nn.ModuleList([ConvBNReLU(2 * width, width, 3) for _ in range(4)])
        self.head = nn.Conv2d(width, 1, 1)

    def residual(self, coarse_logit, image):
        # full-resolution, few-channel convs run far faster channels-last on CPU
        h = torch.cat([torch.sigmoid(coarse_logit), image], dim=1).contiguous(memory_format=torch.channels_last)
        h = self.entry(h)
        skips = []
        for conv in self.enc[:4]:
            h = conv(h)
            skips.append(h)
            h = self.pool(h)
        h = self.enc[4](h)
        for conv, skip in zip(reversed(self.dec), reversed(skips)):
            h = conv(torch.cat([upsample(h, skip.shape[-2:]), skip], dim=1))
        return self.head(h).contiguous()

    def forward(self, coarse_logit, image):
        return coarse_logit + self.residual(coarse_logit, image)


PROB_CLAMP = 1e-6


def rrm_forward(rrm: ResidualRefinement, coarse: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Refine a coarse *probability* map; returns the refined probability map."""
    p = coarse.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return torch.sigmoid(rrm(torch.logit(p), image))
