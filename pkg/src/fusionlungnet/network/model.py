"""End-to-end segmentation network.

Wiring (deep to shallow, levels 4..1 at strides 32, 16, 8, 4)::

    E1..E4 = encoder(x)
    A      = CAA(E4)
    prev   = A
    for level in 4, 3, 2, 1:
        M     = MFF(A, E_level, prev)      # fused at E_level resolution
        S     = SR(M)
        prev  = S
    D4..D1 = decoder over S4..S1, each stage also taking the deeper stage
    side_n = sigmoid(upsample(head_n(D_n)))          n = 1..4
    primary = sigmoid(logit_1 + RRM(logit_1, x))      logit_1 = coarse map

With MFF disabled the decoder reads ``A, E3, E2, E1`` directly; with RRM
disabled the primary map is the finest side output.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .backbone import BackboneConfig, build_encoder, check_input_shape
from .blocks import (
    ChannelAggregationAttention,
    DecoderStage,
    MultiScaleFusion,
    ResidualRefinement,
    SelfRefinement,
    upsample,
)


@dataclass
class AblationFlags:
    use_mff: bool = True
    use_sr: bool = True
    use_rrm: bool = True

    def __post_init__(self):
        if self.use_sr and not self.use_mff:
            raise ValueError("the SR block refines MFF output; use_sr requires use_mff")

    @property
    def label(self) -> str:
        parts = ["baseline"]
        if self.use_mff:
            parts.append("MFF")
        if self.use_sr:
            parts.append("SR")
        if self.use_rrm:
            parts.append("RRM")
        return " + ".join(parts)


BASELINE = AblationFlags(False, False, False)
FULL = AblationFlags(True, True, True)
# row order of the component ablation table
ABLATION_GRID = (
    BASELINE,
    AblationFlags(True, False, False),
    AblationFlags(False, False, True),
    AblationFlags(True, True, False),
    FULL,
)


@dataclass
class SegmentationOutput:
    primary: torch.Tensor
    supplementary: list[torch.Tensor] = field(default_factory=list)

    def maps(self) -> list[torch.Tensor]:
        return [self.primary, *self.supplementary]


def init_weights(module: nn.Module) -> None:
    """He (fan-in) normal init for convs; unit/zero affine for norm layers."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.GroupNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class FusionLungNet(nn.Module):
    def __init__(self, backbone: BackboneConfig | None = None, flags: AblationFlags | None = None, seed: int | None = 0,
                 load_weights: bool = True):
        super().__init__()
        self.backbone_cfg = backbone or BackboneConfig()
        self.flags = flags or AblationFlags()
        cfg, flags = self.backbone_cfg, self.flags
        if seed is not None:
            torch.manual_seed(seed)

        self.encoder = build_encoder(cfg, load_weights)
        ch = cfg.stage_channels
        width = cfg.fuse_channels
        self.caa = ChannelAggregationAttention(ch[3], width)

        self.mff = None
        self.sr = None
        if flags.use_mff:
            self.mff = nn.ModuleList([MultiScaleFusion(width, ch[i], width, width) for i in range(4)])
            if flags.use_sr:
                self.sr = nn.ModuleList([SelfRefinement(width, width) for _ in range(4)])
            lateral = [width] * 4
        else:
            lateral = [ch[0], ch[1], ch[2], width]

        dw = cfg.decoder_channels
        self.decoder = nn.ModuleList(
            [DecoderStage(lateral[i], dw if i < 3 else 0, dw) for i in range(4)]
        )
        self.rrm = ResidualRefinement(4, cfg.rrm_channels) if flags.use_rrm else None

        new_parts = [self.caa, self.decoder, self.mff, self.sr, self.rrm]
        if cfg.variant == "tiny":
            new_parts.append(self.encoder)
        for part in new_parts:
            if part is not None:
                init_weights(part)

    def fused_features(self, feats):
        """Per-level decoder inputs, shallow to deep, plus the CAA output."""
        caa = self.caa(feats[3])
        if self.mff is None:
            return [feats[0], feats[1], feats[2], caa], caa
        lateral = [None] * 4
        prev = caa
        for level in (3, 2, 1, 0):
            m = self.mff[level](caa, feats[level], prev)
            if self.sr is not None:
                m = self.sr[level](m)
            lateral[level] = m
            prev = m
        return lateral, caa

    def decode(self, lateral, size, supervision=True):
        """Run the decoder; returns side logits (level 1 first) at ``size``.

        Without supervision only the level-1 head is evaluated; the other
        entries are None.
        """
        logits = [None] * 4
        d = None
        for level in (3, 2, 1, 0):
            need_head = supervision or level == 0
            d, logit = self.decoder[level](lateral[level], d, with_head=need_head)
            if logit is not None:
                logits[level] = upsample(logit, size)
        return logits

    def forward(self, x, supervision: bool | None = None) -> SegmentationOutput:
        if supervision is None:
            supervision = self.training
        check_input_shape(x)
        size = x.shape[-2:]
        feats = self.encoder(x)
        lateral, _ = self.fused_features(feats)
        logits = self.decode(lateral, size, supervision)
        coarse = logits[0]
        primary_logit = self.rrm(coarse, x) if self.rrm is not None else coarse
        supplementary = [torch.sigmoid(l) for l in logits] if supervision else []
        return SegmentationOutput(torch.sigmoid(primary_logit), supplementary)


def model_forward(model: FusionLungNet, x: torch.Tensor, supervision: bool = True) -> SegmentationOutput:
    return model(x, supervision=supervision)


def count_parameters(module: nn.Module | None) -> int:
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters())


def as_model_input(images: torch.Tensor) -> torch.Tensor:
    """[B, H, W] or [B, 1, H, W] grayscale in [0,1] -> [B, 3, H, W]."""
    if images.dim() == 3:
        images = images.unsqueeze(1)
    if images.shape[1] == 1:
        images = images.expand(-1, 3, -1, -1)
    return images.contiguous()
