"""Training objectives.

The per-map loss is the boundary-weighted BCE + IoU pair: pixels near mask
boundaries (where a box blur of the mask disagrees with the mask) get up to
six times the weight of plain pixels. Stage totals are reported per component
so the logs stay auditable; the total is accumulated in float64 so it equals
the sum of the logged components exactly.
"""

from __future__ import annotations

import dataclasses
import math

import torch
import torch.nn.functional as F


def boundary_weight_kernel(resolution):
    """Box-blur kernel size for the boundary weight: resolution / 12, rounded
    to the nearest odd value, floor 3. 31 at the full 384 px training size."""
    k = int(round(resolution / 12))
    if k % 2 == 0:
        k -= 1
    return max(k, 3)


def ppa_loss(logits, gt, kernel=31, gain=5.0):
    """Pixel-position-aware loss: weighted BCE plus weighted IoU.

    logits, gt: (B, 1, H, W). The weight map is
    1 + gain * |avg_pool_k(gt) - gt| with stride 1 and zero padding
    (padding counted, matching the published definition)."""
    weight = 1.0 + gain * (F.avg_pool2d(gt, kernel, stride=1, padding=kernel // 2) - gt).abs()
    bce = F.binary_cross_entropy_with_logits(logits, gt, reduction="none")
    wbce = (weight * bce).sum(dim=(2, 3)) / weight.sum(dim=(2, 3))
    pred = torch.sigmoid(logits)
    inter = (pred * gt * weight).sum(dim=(2, 3))
    union = ((pred + gt) * weight).sum(dim=(2, 3))
    wiou = 1.0 - (inter + 1.0) / (union - inter + 1.0)
    return (wbce + wiou).mean()


@dataclasses.dataclass
class LossReport:
    total: torch.Tensor
    components: dict

    def check_finite(self):
        return bool(torch.isfinite(self.total)) and all(
            math.isfinite(v) for v in self.components.values())


def _assemble(parts):
    total = None
    components = {}
    for name, value in parts.items():
        components[name] = float(value.detach())
        value = value.double()
        total = value if total is None else total + value
    return LossReport(total=total, components=components)


def stage1_loss(initial_outputs, gt, kernel=31, gain=5.0):
    """Supervision of all nine initial maps against GT."""
    parts = {}
    for name, branch in initial_outputs.items():
        for i, full in enumerate(branch.full_logits):
            parts[f"ppa_{name}{i + 1}"] = ppa_loss(full, gt, kernel, gain)
    return _assemble(parts)


def stage2_loss(qa_d, qa_t, target_d, target_t):
    """BCE of the two quality maps against their soft pseudo targets."""
    parts = {
        "bce_quality_d": F.binary_cross_entropy(qa_d, target_d),
        "bce_quality_t": F.binary_cross_entropy(qa_t, target_t),
    }
    return _assemble(parts)


def stage3_loss(initial_outputs, fusion_out, gt, edge_gt, kernel=31, gain=5.0):
    """Stage-1 terms plus one term per fused map plus edge supervision.

    edge_gt must already be at the edge logits' resolution (stride 4)."""
    parts = {}
    for name, branch in initial_outputs.items():
        for i, full in enumerate(branch.full_logits):
            parts[f"ppa_{name}{i + 1}"] = ppa_loss(full, gt, kernel, gain)
    for level in sorted(fusion_out.logits):
        parts[f"ppa_fused{level}"] = ppa_loss(fusion_out.logits[level], gt, kernel, gain)
    if fusion_out.edge_logits is not None:
        parts["bce_edge"] = F.binary_cross_entropy_with_logits(fusion_out.edge_logits, edge_gt)
    return _assemble(parts)


def baseline_loss(branch_output, gt, kernel=31, gain=5.0):
    """Single-branch ablation: one map, one term."""
    return _assemble({"ppa_base": ppa_loss(branch_output.full_logits[0], gt, kernel, gain)})
