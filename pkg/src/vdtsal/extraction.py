"""Initial feature extraction: shared encoder, per-modality shrinkage decoders,
per-stage prediction heads.

Conv blocks default to GroupNorm: the decoder multiplies feature branches, so
with the tiny batches this code trains at, the train/eval statistics gap of
BatchNorm compounds through the products and can overflow at eval time."""

from __future__ import annotations

import dataclasses
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import HierarchicalEncoder

MODALITIES = ("v", "d", "t")


def _norm2d(kind, channels):
    if kind == "group":
        return nn.GroupNorm(math.gcd(32, channels), channels)
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm {kind!r}")


class ConvBlock(nn.Module):
    # conv -> norm -> relu
    def __init__(self, cin, cout, kernel, norm="group"):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel, padding=kernel // 2)
        self.norm = _norm2d(norm, cout)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class DepthwiseSeparable(nn.Module):
    def __init__(self, channels, kernel, norm="group"):
        super().__init__()
        self.depthwise = nn.Conv2d(channels, channels, kernel, padding=kernel // 2, groups=channels)
        self.norm1 = _norm2d(norm, channels)
        self.pointwise = nn.Conv2d(channels, channels, 1)
        self.norm2 = _norm2d(norm, channels)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        x = self.act(self.norm1(self.depthwise(x)))
        return self.act(self.norm2(self.pointwise(x)))


class MultiScaleFusion(nn.Module):
    """Fuse a decoder level with its upsampled deeper neighbor.

    With c the current level and d the upsampled deeper level:
        mixed = c + d
        gated = (1x1(mixed) * dw3(mixed)) * dw5(mixed)
        out   = 3x3(gated + 1x1(d))
    where dwK is a depthwise-separable conv with kernel K.
    """

    def __init__(self, channels=128, norm="group"):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.point = ConvBlock(channels, channels, 1, norm)
        self.local3 = DepthwiseSeparable(channels, 3, norm)
        self.local5 = DepthwiseSeparable(channels, 5, norm)
        self.deep_point = ConvBlock(channels, channels, 1, norm)
        self.out = ConvBlock(channels, channels, 3, norm)

    def forward(self, current, deeper):
        d = self.up(deeper)
        mixed = current + d
        gated = self.point(mixed) * self.local3(mixed)
        gated = gated * self.local5(mixed)
        return self.out(gated + self.deep_point(d))


class ShrinkageDecoder(nn.Module):
    """Top-down decoder over the four pyramid levels, run three times with the
    grid shrinking by one level per pass. Levels are updated in place, so each
    pass consumes the previous pass's outputs. The bottom (stride 4) node of
    each pass is a stage output."""

    def __init__(self, in_widths, channels=128, norm="group"):
        super().__init__()
        self.proj = nn.ModuleList([ConvBlock(w, channels, 1, norm) for w in in_widths])
        self.passes = nn.ModuleList([
            nn.ModuleList([MultiScaleFusion(channels, norm) for _ in range(top)])
            for top in (3, 2, 1)
        ])

    def forward(self, pyramid):
        levels = [proj(f) for proj, f in zip(self.proj, pyramid)]
        outputs = []
        for pass_idx, nodes in enumerate(self.passes):
            top = 3 - pass_idx
            for node, j in zip(nodes, range(top, 0, -1)):
                levels[j - 1] = node(levels[j - 1], levels[j])
            outputs.append(levels[0])
        return outputs


class PredHead(nn.Module):
    def __init__(self, channels=128, norm="group"):
        super().__init__()
        self.conv = ConvBlock(channels, channels, 3, norm)
        self.out = nn.Conv2d(channels, 1, 1)

    def forward(self, x):
        return self.out(self.conv(x))


@dataclasses.dataclass
class BranchOutput:
    features: list     # stage features, stride 4, decoder width
    logits: list       # 1-channel logits, stride 4
    full_logits: list  # logits upsampled to input resolution
    maps: list         # sigmoid(full_logits)


def _expand(logits, size):
    full = F.interpolate(logits, size=size, mode="bilinear", align_corners=False)
    return full, torch.sigmoid(full)


class InitialExtraction(nn.Module):
    """One weight-shared encoder run per modality, three modality-specific
    decoders, nine modality- and stage-specific prediction heads."""

    def __init__(self, encoder_cfg, channels=128, norm="group"):
        super().__init__()
        self.encoder = HierarchicalEncoder(encoder_cfg)
        self.decoders = nn.ModuleDict({
            m: ShrinkageDecoder(encoder_cfg.stage_widths, channels, norm) for m in MODALITIES
        })
        self.heads = nn.ModuleDict({
            f"{m}{i}": PredHead(channels, norm) for m in MODALITIES for i in (1, 2, 3)
        })

    def forward_branch(self, name, image):
        size = image.shape[-2:]
        features = self.decoders[name](self.encoder(image))
        logits = [self.heads[f"{name}{i + 1}"](f) for i, f in enumerate(features)]
        full, maps = zip(*(_expand(l, size) for l in logits))
        return BranchOutput(features, logits, list(full), list(maps))

    def forward(self, visible, depth, thermal):
        images = {"v": visible, "d": depth, "t": thermal}
        return {name: self.forward_branch(name, images[name]) for name in MODALITIES}


class UShapeDecoder(nn.Module):
    """Plain top-down decoder used by the single-branch baseline."""

    def __init__(self, in_widths, channels=128, norm="group"):
        super().__init__()
        self.proj = nn.ModuleList([ConvBlock(w, channels, 1, norm) for w in in_widths])
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.blocks = nn.ModuleList([ConvBlock(channels, channels, 3, norm) for _ in range(3)])

    def forward(self, pyramid):
        levels = [proj(f) for proj, f in zip(self.proj, pyramid)]
        x = levels[3]
        for block, skip in zip(self.blocks, (levels[2], levels[1], levels[0])):
            x = block(skip + self.up(x))
        return x


class BaselineBranch(nn.Module):
    """Encoder plus U-shape decoder plus a single head. Ablation baseline."""

    def __init__(self, encoder_cfg, channels=128, norm="group"):
        super().__init__()
        self.encoder = HierarchicalEncoder(encoder_cfg)
        self.decoder = UShapeDecoder(encoder_cfg.stage_widths, channels, norm)
        self.head = PredHead(channels, norm)

    def forward(self, image):
        feature = self.decoder(self.encoder(image))
        logits = self.head(feature)
        full, maps = _expand(logits, image.shape[-2:])
        return BranchOutput([feature], [logits], [full], [maps])
