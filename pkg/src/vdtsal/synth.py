"""Synthetic triple-modality scenes with controllable per-modality corruption.

Each sample renders a handful of shapes over smooth textured backgrounds.
Degradation knobs model the failure modes the fusion network is meant to
survive: any modality can silently drop objects (so an object may exist in
only one frame), thermal frames can grow background hotspots that look like
foreground, and any modality can lose contrast or gain sensor noise. The
ground truth always covers every drawn object.
"""

from __future__ import annotations

import dataclasses
import os

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError

MODALITIES = ("visible", "depth", "thermal")


@dataclasses.dataclass
class DegradationSpec:
    drop_object_prob: float = 0.0
    contrast_scale: float = 1.0
    noise_sigma: float = 0.0
    background_hotspot_prob: float = 0.0


@dataclasses.dataclass
class SynthConfig:
    num_samples: int
    resolution: int = 64
    min_objects: int = 1
    max_objects: int = 3
    visible: DegradationSpec = dataclasses.field(default_factory=DegradationSpec)
    depth: DegradationSpec = dataclasses.field(default_factory=DegradationSpec)
    thermal: DegradationSpec = dataclasses.field(default_factory=DegradationSpec)
    seed: int = 0
    split: str = "train"

    def validate(self):
        if self.num_samples < 1:
            raise ConfigError("num_samples must be positive")
        if self.resolution < 32 or self.resolution % 32:
            raise ConfigError("resolution must be >= 32 and divisible by 32")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")
        for name in MODALITIES:
            spec = getattr(self, name)
            for field in ("drop_object_prob", "background_hotspot_prob"):
                p = getattr(spec, field)
                if not 0.0 <= p <= 1.0:
                    raise ConfigError(f"{name}.{field} must be in [0, 1], got {p}")
            if spec.contrast_scale <= 0:
                raise ConfigError(f"{name}.contrast_scale must be positive")
            if spec.noise_sigma < 0:
                raise ConfigError(f"{name}.noise_sigma must be non-negative")

    @classmethod
    def from_config(cls, cfg):
        specs = {}
        for name in MODALITIES:
            specs[name] = DegradationSpec(
                drop_object_prob=cfg.get_float(f"{name}.drop_object_prob", 0.0),
                contrast_scale=cfg.get_float(f"{name}.contrast_scale", 1.0),
                noise_sigma=cfg.get_float(f"{name}.noise_sigma", 0.0),
                background_hotspot_prob=cfg.get_float(f"{name}.background_hotspot_prob", 0.0),
            )
        out = cls(
            num_samples=cfg.get_int("num_samples", required=True),
            resolution=cfg.get_int("resolution", 64),
            min_objects=cfg.get_int("min_objects", 1),
            max_objects=cfg.get_int("max_objects", 3),
            seed=cfg.get_int("seed", 0),
            split=cfg.get_str("split", "train"),
            **specs,
        )
        unused = cfg.unused_keys()
        if unused:
            raise ConfigError(f"{cfg.source}: unknown keys {unused}")
        out.validate()
        return out


def _smooth_noise(rng, res, cells):
    grid = rng.uniform(0.0, 1.0, size=(cells, cells)).astype(np.float32)
    t = torch.from_numpy(grid).unsqueeze(0).unsqueeze(0)
    t = F.interpolate(t, size=(res, res), mode="bilinear", align_corners=False)
    return t.squeeze(0).squeeze(0).numpy()


def _draw_objects(rng, res, min_objects, max_objects):
    """Geometry only. Returns per-object masks so modalities can drop objects."""
    count = int(rng.integers(min_objects, max_objects + 1))
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float32)
    masks = []
    for _ in range(count):
        kind = rng.integers(0, 3)
        cy = rng.uniform(0.22, 0.78) * res
        cx = rng.uniform(0.22, 0.78) * res
        if kind == 0:
            r = rng.uniform(0.10, 0.22) * res
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        elif kind == 1:
            hh = rng.uniform(0.09, 0.20) * res
            hw = rng.uniform(0.09, 0.20) * res
            mask = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
        else:
            ry = rng.uniform(0.09, 0.22) * res
            rx = rng.uniform(0.09, 0.22) * res
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        masks.append(mask)
    return masks


def _finish(img, spec, rng):
    img = 0.5 + (img - 0.5) * spec.contrast_scale
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _render_visible(rng, res, masks, spec):
    img = np.empty((res, res, 3), dtype=np.float32)
    cells = max(2, res // 16)
    for c in range(3):
        img[:, :, c] = 0.35 + 0.3 * _smooth_noise(rng, res, cells)
    dropped = False
    for mask in masks:
        # extra draw only when dropping is on, so prob 0 keeps the old stream
        if spec.drop_object_prob > 0 and rng.random() < spec.drop_object_prob:
            dropped = True
            continue
        color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
        img[mask] = color
    return _finish(img, spec, rng), dropped


def _render_depth(rng, res, masks, spec):
    img = 0.2 + 0.25 * _smooth_noise(rng, res, max(2, res // 16))
    dropped = False
    for mask in masks:
        value = rng.uniform(0.65, 0.95)
        if rng.random() < spec.drop_object_prob:
            dropped = True
            continue
        img[mask] = value
    return _finish(img, spec, rng), dropped


def _render_thermal(rng, res, masks, spec, gt):
    img = 0.1 + 0.25 * _smooth_noise(rng, res, max(2, res // 16))
    dropped = False
    for mask in masks:
        if spec.drop_object_prob > 0 and rng.random() < spec.drop_object_prob:
            dropped = True
            continue
        img[mask] = rng.uniform(0.7, 0.95)
    hot = rng.random() < spec.background_hotspot_prob
    if hot:
        yy, xx = np.mgrid[0:res, 0:res].astype(np.float32)
        for _ in range(int(rng.integers(1, 4))):
            cy = cx = None
            for _try in range(10):
                y = rng.uniform(0.1, 0.9) * res
                x = rng.uniform(0.1, 0.9) * res
                if not gt[int(y), int(x)]:
                    cy, cx = y, x
                    break
            if cy is None:
                continue
            amp = rng.uniform(0.45, 0.75)
            sigma = rng.uniform(0.05, 0.11) * res
            blob = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma * sigma))
            img = img + blob.astype(np.float32)
    return _finish(img, spec, rng), dropped, hot


def _save_png(path, arr):
    Image.fromarray(arr).save(path, format="PNG")


def render_sample(cfg, index):
    """Pure function of (config, index): one sample's rasters and tags."""
    geom_rng = np.random.default_rng([cfg.seed, index, 0])
    masks = _draw_objects(geom_rng, cfg.resolution, cfg.min_objects, cfg.max_objects)
    gt = np.zeros((cfg.resolution, cfg.resolution), dtype=np.float32)
    for mask in masks:
        gt[mask] = 1.0

    visible, v_dropped = _render_visible(np.random.default_rng([cfg.seed, index, 1]), cfg.resolution, masks, cfg.visible)
    depth, d_dropped = _render_depth(np.random.default_rng([cfg.seed, index, 2]), cfg.resolution, masks, cfg.depth)
    thermal, t_dropped, hot = _render_thermal(np.random.default_rng([cfg.seed, index, 3]), cfg.resolution, masks, cfg.thermal, gt)

    tags = []
    if v_dropped:
        tags.append("visible-drop")
    if d_dropped:
        tags.append("depth-drop")
    if t_dropped:
        tags.append("thermal-drop")
    if hot:
        tags.append("thermal-hot")
    if not tags:
        tags.append("clean")
    return visible, depth, thermal, gt, tags


def synthesize_dataset(cfg, out_root):
    """Write `<out_root>/<split>/{V,D,T,GT}/*.png` plus manifest.tsv.

    Deterministic: the same config writes byte-identical files."""
    cfg.validate()
    split_dir = os.path.join(out_root, cfg.split)
    for mod in ("V", "D", "T", "GT"):
        os.makedirs(os.path.join(split_dir, mod), exist_ok=True)
    manifest_lines = []
    for index in range(cfg.num_samples):
        visible, depth, thermal, gt, tags = render_sample(cfg, index)
        stem = f"{index:05d}"
        _save_png(os.path.join(split_dir, "V", stem + ".png"),
                  np.round(visible * 255.0).astype(np.uint8))
        _save_png(os.path.join(split_dir, "D", stem + ".png"),
                  np.round(depth * 255.0).astype(np.uint8))
        _save_png(os.path.join(split_dir, "T", stem + ".png"),
                  np.round(thermal * 255.0).astype(np.uint8))
        _save_png(os.path.join(split_dir, "GT", stem + ".png"),
                  (gt * 255.0).astype(np.uint8))
        manifest_lines.append(f"{stem}\t{','.join(tags)}\n")
    with open(os.path.join(split_dir, "manifest.tsv"), "w", encoding="utf-8") as fh:
        fh.writelines(manifest_lines)
    return split_dir
