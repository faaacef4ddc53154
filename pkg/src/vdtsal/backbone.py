"""Hierarchical windowed-attention encoder shared by the three modality streams.

Four stages of shifted-window transformer blocks over 4x4 patch tokens, with
patch merging between stages. Produces a feature pyramid at strides 4/8/16/32.
Token grids that do not divide the window are zero-padded on the right/bottom
inside each block and cropped afterwards, so any input divisible by
patch_size * 8 is legal.
"""

from __future__ import annotations

import dataclasses

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.init import trunc_normal_

from .errors import ConfigError, ResolutionError


@dataclasses.dataclass
class EncoderConfig:
    patch_size: int = 4
    window_size: int = 7
    stage_depths: tuple = (2, 2, 6, 2)
    stage_widths: tuple = (96, 192, 384, 768)
    num_heads: tuple = (3, 6, 12, 24)
    mlp_ratio: float = 4.0

    def validate(self):
        if len(self.stage_depths) != 4 or len(self.stage_widths) != 4 or len(self.num_heads) != 4:
            raise ConfigError("encoder presets use exactly four stages")
        if self.patch_size < 1 or self.window_size < 1:
            raise ConfigError("patch_size and window_size must be positive")
        for width, heads in zip(self.stage_widths, self.num_heads):
            if width % heads:
                raise ConfigError(f"stage width {width} not divisible by {heads} heads")

    @classmethod
    def preset(cls, name):
        if name == "toy":
            return cls(patch_size=4, window_size=4, stage_depths=(2, 2, 2, 2),
                       stage_widths=(32, 64, 128, 256), num_heads=(1, 2, 4, 8))
        if name == "large":
            return cls(patch_size=4, window_size=12, stage_depths=(2, 2, 18, 2),
                       stage_widths=(128, 256, 512, 1024), num_heads=(4, 8, 16, 32))
        raise ConfigError(f"unknown encoder preset {name!r}")


def window_partition(x, window_size):
    # (B, H, W, C) -> (num_windows*B, window_size*window_size, C)
    B, H, W, C = x.shape
    x = x.view(B, H // window_size, window_size, W // window_size, window_size, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window_size * window_size, C)


def window_reverse(windows, window_size, H, W):
    B = windows.shape[0] // (H * W // window_size // window_size)
    x = windows.view(B, H // window_size, W // window_size, window_size, window_size, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(B, H, W, -1)


class WindowAttention(nn.Module):
    """Multi-head self attention within non-overlapping windows, with a learned
    relative position bias."""

    def __init__(self, dim, window_size, num_heads):
        super().__init__()
        self.dim = dim
        self.window_size = window_size
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5

        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window_size - 1) ** 2, num_heads))
        coords = torch.stack(torch.meshgrid(
            torch.arange(window_size), torch.arange(window_size), indexing="ij"))
        coords_flat = torch.flatten(coords, 1)
        relative = coords_flat[:, :, None] - coords_flat[:, None, :]
        relative = relative.permute(1, 2, 0).contiguous()
        relative[:, :, 0] += window_size - 1
        relative[:, :, 1] += window_size - 1
        relative[:, :, 0] *= 2 * window_size - 1
        self.register_buffer("relative_position_index", relative.sum(-1))

        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)
        trunc_normal_(self.relative_position_bias_table, std=0.02)

    def forward(self, x, mask=None):
        B_, N, C = x.shape
        qkv = self.qkv(x).reshape(B_, N, 3, self.num_heads, C // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)

        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        bias = bias.view(N, N, -1).permute(2, 0, 1).contiguous()
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            nW = mask.shape[0]
            attn = attn.view(B_ // nW, nW, self.num_heads, N, N) + mask.unsqueeze(1).unsqueeze(0)
            attn = attn.view(-1, self.num_heads, N, N)
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(B_, N, C)
        return self.proj(x)


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SwinBlock(nn.Module):
    def __init__(self, dim, num_heads, window_size, shift, mlp_ratio=4.0):
        super().__init__()
        self.window_size = window_size
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self._mask_cache = {}

    def _attn_mask(self, Hp, Wp, device):
        key = (Hp, Wp)
        if key in self._mask_cache:
            return self._mask_cache[key].to(device)
        ws, shift = self.window_size, self.window_size // 2
        img_mask = torch.zeros((1, Hp, Wp, 1))
        cnt = 0
        for h in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
            for w in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
                img_mask[:, h, w, :] = cnt
                cnt += 1
        mask_windows = window_partition(img_mask, ws).squeeze(-1)
        attn_mask = mask_windows.unsqueeze(1) - mask_windows.unsqueeze(2)
        attn_mask = attn_mask.masked_fill(attn_mask != 0, -100.0).masked_fill(attn_mask == 0, 0.0)
        self._mask_cache[key] = attn_mask
        return attn_mask.to(device)

    def forward(self, x, H, W):
        B, L, C = x.shape
        ws = self.window_size
        shortcut = x
        x = self.norm1(x).view(B, H, W, C)

        pad_b = (ws - H % ws) % ws
        pad_r = (ws - W % ws) % ws
        if pad_b or pad_r:
            x = F.pad(x, (0, 0, 0, pad_r, 0, pad_b))
        Hp, Wp = H + pad_b, W + pad_r

        # shifting is pointless once a single window covers the grid
        shift = self.shift if min(H, W) > ws else 0
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
            mask = self._attn_mask(Hp, Wp, x.device)
        else:
            mask = None

        windows = window_partition(x, ws)
        windows = self.attn(windows, mask=mask)
        x = window_reverse(windows, ws, Hp, Wp)

        if shift:
            x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
        if pad_b or pad_r:
            x = x[:, :H, :W, :].contiguous()
        x = shortcut + x.view(B, L, C)
        x = x + self.mlp(self.norm2(x))
        return x


class PatchMerging(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x, H, W):
        B, L, C = x.shape
        x = x.view(B, H, W, C)
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], -1)
        x = x.view(B, (H // 2) * (W // 2), 4 * C)
        return self.reduction(self.norm(x)), H // 2, W // 2


class HierarchicalEncoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        widths = cfg.stage_widths
        self.patch_embed = nn.Conv2d(3, widths[0], kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.patch_norm = nn.LayerNorm(widths[0])

        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        self.out_norms = nn.ModuleList()
        for i in range(4):
            blocks = nn.ModuleList([
                SwinBlock(widths[i], cfg.num_heads[i], cfg.window_size,
                          shift=(cfg.window_size // 2) if b % 2 else 0,
                          mlp_ratio=cfg.mlp_ratio)
                for b in range(cfg.stage_depths[i])
            ])
            self.stages.append(blocks)
            self.out_norms.append(nn.LayerNorm(widths[i]))
            if i < 3:
                self.merges.append(PatchMerging(widths[i]))
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(m):
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

    def load_weights(self, path):
        state = torch.load(path, map_location="cpu", weights_only=True)
        if "model" in state:
            state = state["model"]
        self.load_state_dict(state, strict=False)

    def forward(self, images):
        """images: (B, 3, H, W) with H and W divisible by patch_size * 8.
        Returns the four-level pyramid as NCHW tensors, shallow to deep."""
        B, C, H, W = images.shape
        step = self.cfg.patch_size * 8
        if H % step or W % step:
            raise ResolutionError(f"input {H}x{W} not divisible by {step}")
        x = self.patch_embed(images)
        h, w = x.shape[2], x.shape[3]
        x = self.patch_norm(x.flatten(2).transpose(1, 2))

        pyramid = []
        for i in range(4):
            for block in self.stages[i]:
                x = block(x, h, w)
            out = self.out_norms[i](x).transpose(1, 2).reshape(B, -1, h, w)
            pyramid.append(out)
            if i < 3:
                x, h, w = self.merges[i](x, h, w)
        return pyramid
