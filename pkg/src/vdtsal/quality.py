"""Weakly supervised quality estimation for the depth and thermal streams.

Pseudo targets are built from the extraction subnet's deepest predictions: a
region of a modality is marked high quality where it predicts foreground more
confidently than the other two modalities agree on (inside GT), and low
quality where it co-fires with them on background. The quality net itself is
a small residual encoder over the stacked nine-channel input with a U-shaped
decoder and two sigmoid heads.
"""

from __future__ import annotations

import dataclasses

import torch
import torch.nn as nn
import torch.nn.functional as F


def pseudo_high_quality(primary, ref_a, ref_b, gt):
    """relu(primary - mean(refs)) gated to GT foreground."""
    return torch.relu(primary - 0.5 * (ref_a + ref_b)) * gt


def pseudo_low_quality(primary, ref_a, ref_b, gt):
    """primary * mean(refs) gated to GT background."""
    return primary * (0.5 * (ref_a + ref_b)) * (1.0 - gt)


@dataclasses.dataclass
class PseudoTargets:
    high: torch.Tensor
    low: torch.Tensor
    combined: torch.Tensor


def build_pseudo_targets(primary, ref_a, ref_b, gt):
    high = pseudo_high_quality(primary, ref_a, ref_b, gt)
    low = pseudo_low_quality(primary, ref_a, ref_b, gt)
    return PseudoTargets(high=high, low=low, combined=torch.clamp(high + low, 0.0, 1.0))


def quality_targets(initial_outputs, gt):
    """Pseudo targets for depth and thermal from the deepest-stage maps."""
    pv = initial_outputs["v"].maps[2]
    pd = initial_outputs["d"].maps[2]
    pt = initial_outputs["t"].maps[2]
    return {
        "d": build_pseudo_targets(pd, pv, pt, gt),
        "t": build_pseudo_targets(pt, pv, pd, gt),
    }


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.act = nn.ReLU(inplace=True)
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                                      nn.BatchNorm2d(cout))
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        out = self.act(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.act(out + self.skip(x))


def _widen_first_conv(out_channels, kernel, stride, padding, groups=3):
    """A conv over the stacked modalities whose weight starts as the 3-channel
    initialization tiled across the groups and scaled by 1/groups, preserving
    the activation scale of the single-image layout."""
    conv = nn.Conv2d(3 * groups, out_channels, kernel, stride=stride, padding=padding, bias=False)
    base = torch.empty(out_channels, 3, kernel, kernel)
    nn.init.kaiming_normal_(base, mode="fan_out", nonlinearity="relu")
    with torch.no_grad():
        conv.weight.copy_(base.repeat(1, groups, 1, 1) / groups)
    return conv


class _UpBlock(nn.Module):
    def __init__(self, cin, skip, cout):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(cin + skip, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return self.conv(torch.cat([x, skip], dim=1))


class QualityNet(nn.Module):
    """Shared trunk, two sibling heads. Outputs per-pixel reliability maps for
    the depth and thermal streams, strictly inside (0, 1)."""

    PRESETS = {
        "toy": ((16, 16, 32, 64, 128), (1, 1, 1, 1)),
        "large": ((64, 64, 128, 256, 512), (3, 4, 6, 3)),
    }

    def __init__(self, scale_preset="toy"):
        super().__init__()
        widths, depths = self.PRESETS[scale_preset]
        self.stem = nn.Sequential(
            _widen_first_conv(widths[0], 7, stride=2, padding=3),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        self.layers = nn.ModuleList()
        cin = widths[0]
        for i, (width, depth) in enumerate(zip(widths[1:], depths)):
            blocks = [ResidualBlock(cin, width, stride=1 if i == 0 else 2)]
            blocks += [ResidualBlock(width, width) for _ in range(depth - 1)]
            self.layers.append(nn.Sequential(*blocks))
            cin = width
        self.up4 = _UpBlock(widths[4], widths[3], widths[3])
        self.up3 = _UpBlock(widths[3], widths[2], widths[2])
        self.up2 = _UpBlock(widths[2], widths[1], widths[1])
        self.up1 = _UpBlock(widths[1], widths[0], widths[0])
        self.final = nn.Sequential(
            nn.Conv2d(widths[0], widths[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
        )
        self.head_depth = nn.Conv2d(widths[0], 1, 1)
        self.head_thermal = nn.Conv2d(widths[0], 1, 1)

    def forward(self, visible, depth, thermal):
        size = visible.shape[-2:]
        x = torch.cat([visible, depth, thermal], dim=1)
        c0 = self.stem(x)
        feats = []
        y = self.pool(c0)
        for layer in self.layers:
            y = layer(y)
            feats.append(y)
        c1, c2, c3, c4 = feats
        y = self.up4(c4, c3)
        y = self.up3(y, c2)
        y = self.up2(y, c1)
        y = self.up1(y, c0)
        y = F.interpolate(y, size=size, mode="bilinear", align_corners=False)
        y = self.final(y)
        return torch.sigmoid(self.head_depth(y)), torch.sigmoid(self.head_thermal(y))
