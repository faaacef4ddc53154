"""Region-guided selective fusion.

Per decoder stage the depth and thermal features are purified against the
visible stream under the predicted quality maps, fused pairwise by linear
token attention, cascaded across stages, and finally sharpened by an edge
refinement block that also emits edge logits for supervision.
"""

from __future__ import annotations

import dataclasses

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import HeadDivisibilityError
from .extraction import ConvBlock, PredHead, _norm2d


@dataclasses.dataclass
class PurifiedPair:
    high: torch.Tensor
    low: torch.Tensor
    combined: torch.Tensor


def purify(primary, visible, other, qa, use_high=True, use_low=True):
    """Quality-gated blend of one auxiliary stream with the visible stream.

    high = (primary - (visible + other) / 2) * qa   keeps the auxiliary signal
                                                    where it is trustworthy
    low  = visible * (1 - qa)                       falls back to visible where
                                                    it is not
    The ablation flags swap either term for the raw feature."""
    if qa.shape[-2:] != primary.shape[-2:]:
        qa = F.interpolate(qa, size=primary.shape[-2:], mode="bilinear", align_corners=False)
    if use_high:
        high = (primary - 0.5 * (visible + other)) * qa
    else:
        high = primary
    if use_low:
        low = visible * (1.0 - qa)
    else:
        low = visible
    return PurifiedPair(high=high, low=low, combined=high + low)


def linear_attention(q, k, v, num_heads):
    """Linear-complexity attention: softmax over channels for queries, over
    tokens for keys, so the token interaction goes through a per-head
    (channels x channels) context matrix instead of a token-pair map.

    q, k, v: (B, N, C). Returns (output (B, N, C), context (B, heads, d, d))."""
    B, N, C = q.shape
    if C % num_heads:
        raise HeadDivisibilityError(f"{C} channels not divisible by {num_heads} heads")
    d = C // num_heads

    def split(x):
        return x.view(B, -1, num_heads, d).transpose(1, 2)

    qh, kh, vh = split(q), split(k), split(v)
    qn = qh.softmax(dim=-1)
    kn = kh.softmax(dim=2)
    context = kn.transpose(-2, -1) @ vh
    out = (qn @ context).transpose(1, 2).reshape(B, N, C)
    return out, context


class TokenAttention(nn.Module):
    """Projected linear attention with a residual back to the query tokens.
    Self attention when both arguments are the same tensor."""

    def __init__(self, dim, num_heads):
        super().__init__()
        if dim % num_heads:
            raise HeadDivisibilityError(f"{dim} channels not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, query_tokens, context_tokens):
        out, _ = linear_attention(
            self.to_q(query_tokens), self.to_k(context_tokens), self.to_v(context_tokens),
            self.num_heads)
        return query_tokens + self.proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim, ratio=4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.fc2 = nn.Linear(dim * ratio, dim)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return x + self.fc2(self.act(self.fc1(x)))


class TokenBranch(nn.Module):
    # self attention on own tokens, cross attention against the partner, feed-forward
    def __init__(self, dim, num_heads):
        super().__init__()
        self.intra = TokenAttention(dim, num_heads)
        self.inter = TokenAttention(dim, num_heads)
        self.ff = FeedForward(dim)

    def forward(self, own, partner):
        x = self.intra(own, own)
        x = self.inter(x, partner)
        return self.ff(x)


class ChannelGate(nn.Module):
    def __init__(self, channels, reduction=16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
        )

    def forward(self, x):
        avg = F.adaptive_avg_pool2d(x, 1)
        peak = F.adaptive_max_pool2d(x, 1)
        return x * torch.sigmoid(self.mlp(avg) + self.mlp(peak))


class SpatialGate(nn.Module):
    def __init__(self, kernel=7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel, padding=kernel // 2)

    def forward(self, x):
        stats = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return x * torch.sigmoid(self.conv(stats))


class Cbam(nn.Module):
    def __init__(self, channels, reduction=16):
        super().__init__()
        self.channel = ChannelGate(channels, reduction)
        self.spatial = SpatialGate()

    def forward(self, x):
        return self.spatial(self.channel(x))


class IntraInterFusion(nn.Module):
    """Two token branches over the purified pair, merged with the deeper fused
    state and gated by channel/spatial attention. Tokens are the 1x1 spatial
    unfolding of the stride-4 grid."""

    def __init__(self, dim=128, num_heads=4):
        super().__init__()
        self.branch_vd = TokenBranch(dim, num_heads)
        self.branch_vt = TokenBranch(dim, num_heads)
        self.cbam = Cbam(dim)

    def forward(self, w_vd, w_vt, prev=None):
        B, C, H, W = w_vd.shape
        t_vd = w_vd.flatten(2).transpose(1, 2)
        t_vt = w_vt.flatten(2).transpose(1, 2)
        a = self.branch_vd(t_vd, t_vt)
        b = self.branch_vt(t_vt, t_vd)
        fused = (a + b).transpose(1, 2).reshape(B, C, H, W)
        if prev is not None:
            fused = fused + prev
        return self.cbam(fused)


class SumConvFusion(nn.Module):
    # ablation stand-in for the attention block: sum then two convs
    def __init__(self, dim=128, norm="group"):
        super().__init__()
        self.conv1 = ConvBlock(dim, dim, 3, norm)
        self.conv2 = ConvBlock(dim, dim, 3, norm)

    def forward(self, w_vd, w_vt, prev=None):
        fused = w_vd + w_vt
        if prev is not None:
            fused = fused + prev
        return self.conv2(self.conv1(fused))


def _border_counts(n, like):
    c = torch.full((n,), 3.0, dtype=like.dtype, device=like.device)
    c[0] -= 1
    c[-1] -= 1
    return c


def high_pass_residual(x):
    """x minus the average of its 3x3 neighborhood, border averages using valid
    pixels only. Accumulated as center-minus-neighbor differences so a spatially
    constant input yields exactly zero everywhere."""
    H, W = x.shape[-2:]
    total = torch.zeros_like(x)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            t, b = max(0, dy), max(0, -dy)
            l, r = max(0, dx), max(0, -dx)
            diff = x[..., t:H - b, l:W - r] - x[..., b:H - t, r:W - l]
            total = total + F.pad(diff, (l, r, t, b))
    count = torch.outer(_border_counts(H, x), _border_counts(W, x))
    return total / count


class EdgeRefine(nn.Module):
    """Sharpen the finest fused feature with a high-pass edge gate.

        base   = 1x1(x)
        r      = base - avg3x3(base)
        e      = 1x1+norm(r)          edge logits, supervised externally
        gated  = base + base * sigmoid(e)
        out    = cbam(gated)
    """

    def __init__(self, dim=128, norm="group"):
        super().__init__()
        self.proj = nn.Conv2d(dim, dim, 1)
        self.edge_head = nn.Sequential(
            nn.Conv2d(dim, 1, 1),
            _norm2d(norm, 1),
        )
        self.cbam = Cbam(dim)

    def forward(self, x):
        base = self.proj(x)
        residual = high_pass_residual(base)
        edge_logits = self.edge_head(residual)
        gated = base + base * torch.sigmoid(edge_logits)
        return self.cbam(gated), edge_logits


@dataclasses.dataclass
class FusionOutput:
    logits: dict        # fusion level -> logits at output resolution
    edge_logits: torch.Tensor | None   # stride 4, None without edge refinement
    final_logits: torch.Tensor


class SelectiveFusion(nn.Module):
    """Fusion subnet over the three per-stage feature triples.

    The three fusion blocks run as a cascade; `descending` feeds the deepest
    stage's output into the next-shallower block, `ascending` the reverse.
    Level 0 is the edge-refined map and is the deployment output; without edge
    refinement the deployment output falls back to level 1."""

    def __init__(self, channels=128, num_heads=4, norm="group", cascade_order="descending",
                 use_attention=True, use_edge_refine=True, use_high=True, use_low=True,
                 sum_inputs=False):
        super().__init__()
        assert cascade_order in ("descending", "ascending")
        self.cascade_order = cascade_order
        self.use_high = use_high
        self.use_low = use_low
        self.sum_inputs = sum_inputs
        if use_attention:
            self.fuse = nn.ModuleList([IntraInterFusion(channels, num_heads) for _ in range(3)])
        else:
            self.fuse = nn.ModuleList([SumConvFusion(channels, norm) for _ in range(3)])
        self.refine = EdgeRefine(channels, norm) if use_edge_refine else None
        levels = (0, 1, 2, 3) if use_edge_refine else (1, 2, 3)
        self.heads = nn.ModuleDict({str(i): PredHead(channels, norm) for i in levels})

    def forward(self, feats_v, feats_d, feats_t, qa_d, qa_t, out_size):
        pairs = []
        for s in range(3):
            if self.sum_inputs:
                summed = feats_v[s] + feats_d[s] + feats_t[s]
                pairs.append((summed, summed))
            else:
                vd = purify(feats_d[s], feats_v[s], feats_t[s], qa_d,
                            self.use_high, self.use_low).combined
                vt = purify(feats_t[s], feats_v[s], feats_d[s], qa_t,
                            self.use_high, self.use_low).combined
                pairs.append((vd, vt))

        order = (2, 1, 0) if self.cascade_order == "descending" else (0, 1, 2)
        fused = [None, None, None]
        prev = None
        for s in order:
            fused[s] = self.fuse[s](pairs[s][0], pairs[s][1], prev)
            prev = fused[s]

        logits = {}
        edge_logits = None
        if self.refine is not None:
            refined, edge_logits = self.refine(fused[0])
            logits[0] = self.heads["0"](refined)
        for i in (1, 2, 3):
            logits[i] = self.heads[str(i)](fused[i - 1])
        logits = {
            i: F.interpolate(l, size=out_size, mode="bilinear", align_corners=False)
            for i, l in logits.items()
        }
        final = logits[0] if self.refine is not None else logits[1]
        return FusionOutput(logits=logits, edge_logits=edge_logits, final_logits=final)
