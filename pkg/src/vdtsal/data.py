"""Triple-modality saliency samples: discovery, loading, edge targets, augmentation.

Datasets live under `<root>/<split>/{V,D,T,GT}/<id>.png`. V is RGB, D and T are
grayscale (replicated to three channels at load time), GT is a binary mask.
An optional `manifest.tsv` next to the modality folders carries per-sample
challenge tags (`id<TAB>tag1,tag2`).
"""

from __future__ import annotations

import dataclasses
import os

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .errors import DecodeError, EmptyDatasetError, MissingModalityError

MODALITY_DIRS = ("V", "D", "T", "GT")


@dataclasses.dataclass
class SampleEntry:
    sample_id: str
    paths: dict
    tags: tuple = ()


@dataclasses.dataclass
class DatasetManifest:
    root: str
    split: str
    entries: list

    def __len__(self):
        return len(self.entries)


@dataclasses.dataclass
class TripleModalSample:
    sample_id: str
    visible: np.ndarray   # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray     # (H, W, 3) float32 in [0, 1]
    thermal: np.ndarray   # (H, W, 3) float32 in [0, 1]
    gt: np.ndarray        # (H, W) float32 in {0, 1}
    edge: np.ndarray      # (H, W) float32 in {0, 1}
    native_size: tuple    # (H, W) of the stored rasters


def _read_tags(split_dir):
    path = os.path.join(split_dir, "manifest.tsv")
    tags = {}
    if not os.path.isfile(path):
        return tags
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            stem, _, raw = line.partition("\t")
            tags[stem] = tuple(t for t in raw.split(",") if t)
    return tags


def discover_dataset(root, split):
    """Pair V/D/T/GT files by shared stem. Every stem must exist in all four dirs."""
    split_dir = os.path.join(root, split)
    stems_per_dir = {}
    for mod in MODALITY_DIRS:
        mod_dir = os.path.join(split_dir, mod)
        if os.path.isdir(mod_dir):
            names = [n for n in os.listdir(mod_dir) if n.lower().endswith(".png")]
            stems_per_dir[mod] = {os.path.splitext(n)[0]: os.path.join(mod_dir, n) for n in names}
        else:
            stems_per_dir[mod] = {}
    all_stems = set()
    for stems in stems_per_dir.values():
        all_stems.update(stems)
    if not all_stems:
        raise EmptyDatasetError(f"no samples under {split_dir}")
    for stem in sorted(all_stems):
        missing = [mod for mod in MODALITY_DIRS if stem not in stems_per_dir[mod]]
        if missing:
            raise MissingModalityError(f"sample {stem!r} is missing {'/'.join(missing)}")
    tags = _read_tags(split_dir)
    entries = [
        SampleEntry(stem, {mod: stems_per_dir[mod][stem] for mod in MODALITY_DIRS}, tags.get(stem, ()))
        for stem in sorted(all_stems)
    ]
    return DatasetManifest(root=root, split=split, entries=entries)


def _open_image(path):
    try:
        with Image.open(path) as img:
            img.load()
            return img.copy()
    except Exception as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc


def _read_rgb(path, resolution=None):
    img = _open_image(path).convert("RGB")
    if resolution is not None and img.size != (resolution, resolution):
        img = img.resize((resolution, resolution), Image.Resampling.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def _read_mask(path, resolution=None):
    img = _open_image(path).convert("L")
    native = (img.size[1], img.size[0])
    if resolution is not None and img.size != (resolution, resolution):
        img = img.resize((resolution, resolution), Image.Resampling.NEAREST)
    mask = (np.asarray(img, dtype=np.float32) >= 128.0).astype(np.float32)
    return mask, native


def derive_edge_gt(gt):
    """Morphological gradient of a binary mask: dilation minus erosion with a 3x3
    window and replicated borders, binarized. Nonzero exactly at pixels whose 3x3
    neighborhood contains both labels."""
    gt = np.asarray(gt, dtype=np.float32)
    hi = ndimage.maximum_filter(gt, size=3, mode="nearest")
    lo = ndimage.minimum_filter(gt, size=3, mode="nearest")
    return (hi - lo > 0).astype(np.float32)


def load_sample(entry, resolution=None):
    """Load one sample, optionally resized to `resolution` (bilinear for images,
    nearest for the mask). The edge target is derived from the loaded mask."""
    visible = _read_rgb(entry.paths["V"], resolution)
    depth = _read_rgb(entry.paths["D"], resolution)
    thermal = _read_rgb(entry.paths["T"], resolution)
    gt, native = _read_mask(entry.paths["GT"], resolution)
    return TripleModalSample(
        sample_id=entry.sample_id,
        visible=visible,
        depth=depth,
        thermal=thermal,
        gt=gt,
        edge=derive_edge_gt(gt),
        native_size=native,
    )


def load_modalities(entry, resolution=None):
    """V/D/T only, for prediction on inputs that may lack GT."""
    visible = _read_rgb(entry.paths["V"], resolution)
    depth = _read_rgb(entry.paths["D"], resolution)
    thermal = _read_rgb(entry.paths["T"], resolution)
    with _open_image(entry.paths["V"]) as img:
        native = (img.size[1], img.size[0])
    return visible, depth, thermal, native


def list_prediction_inputs(input_dir):
    """Stems present in all of V/D/T under `input_dir`. GT is not required."""
    stems_per_dir = {}
    for mod in ("V", "D", "T"):
        mod_dir = os.path.join(input_dir, mod)
        if not os.path.isdir(mod_dir):
            raise EmptyDatasetError(f"missing directory {mod_dir}")
        names = [n for n in os.listdir(mod_dir) if n.lower().endswith(".png")]
        stems_per_dir[mod] = {os.path.splitext(n)[0]: os.path.join(mod_dir, n) for n in names}
    stems = set(stems_per_dir["V"])
    for mod in ("D", "T"):
        stems &= set(stems_per_dir[mod])
    if not stems:
        raise EmptyDatasetError(f"no complete V/D/T triples under {input_dir}")
    return [
        SampleEntry(stem, {mod: stems_per_dir[mod][stem] for mod in ("V", "D", "T")})
        for stem in sorted(stems)
    ]


def _resize_image_np(arr, size):
    # arr: (H, W, C) float32
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1).unsqueeze(0)
    t = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return t.squeeze(0).permute(1, 2, 0).contiguous().numpy()


def _resize_mask_np(arr, size):
    t = torch.from_numpy(np.ascontiguousarray(arr)).unsqueeze(0).unsqueeze(0)
    t = F.interpolate(t, size=size, mode="nearest")
    out = t.squeeze(0).squeeze(0).numpy()
    return (out > 0.5).astype(np.float32)


@dataclasses.dataclass
class AugmentParams:
    flip: bool = False
    quarter_turns: int = 0
    crop: tuple | None = None  # (top, bottom, left, right) margin fractions, each <= 0.05


def draw_augment_params(rng):
    flip = bool(rng.random() < 0.5)
    quarter_turns = int(rng.integers(0, 4))
    crop = None
    if rng.random() < 0.5:
        crop = tuple(float(v) for v in rng.uniform(0.0, 0.05, size=4))
    return AugmentParams(flip=flip, quarter_turns=quarter_turns, crop=crop)


def apply_augment(sample, params):
    """One geometric transform applied identically to all five rasters."""
    imgs = [sample.visible, sample.depth, sample.thermal]
    masks = [sample.gt, sample.edge]
    if params.flip:
        imgs = [np.flip(a, axis=1) for a in imgs]
        masks = [np.flip(a, axis=1) for a in masks]
    if params.quarter_turns % 4:
        k = params.quarter_turns % 4
        imgs = [np.rot90(a, k, axes=(0, 1)) for a in imgs]
        masks = [np.rot90(a, k, axes=(0, 1)) for a in masks]
    imgs = [np.ascontiguousarray(a) for a in imgs]
    masks = [np.ascontiguousarray(a) for a in masks]
    if params.crop is not None:
        h, w = masks[0].shape
        top = int(round(params.crop[0] * h))
        bottom = int(round(params.crop[1] * h))
        left = int(round(params.crop[2] * w))
        right = int(round(params.crop[3] * w))
        if h - top - bottom >= 8 and w - left - right >= 8:
            size = (h, w)
            imgs = [_resize_image_np(a[top:h - bottom, left:w - right], size) for a in imgs]
            masks = [_resize_mask_np(a[top:h - bottom, left:w - right], size) for a in masks]
    return TripleModalSample(
        sample_id=sample.sample_id,
        visible=imgs[0],
        depth=imgs[1],
        thermal=imgs[2],
        gt=masks[0],
        edge=masks[1],
        native_size=sample.native_size,
    )


def augment_sample(sample, rng):
    return apply_augment(sample, draw_augment_params(rng))


def batch_to_tensors(samples, device="cpu"):
    """Stack samples into NCHW tensors. Masks get a channel axis."""
    def stack_images(arrs):
        return torch.stack([torch.from_numpy(a).permute(2, 0, 1) for a in arrs]).to(device)

    def stack_masks(arrs):
        return torch.stack([torch.from_numpy(a).unsqueeze(0) for a in arrs]).to(device)

    return {
        "visible": stack_images([s.visible for s in samples]),
        "depth": stack_images([s.depth for s in samples]),
        "thermal": stack_images([s.thermal for s in samples]),
        "gt": stack_masks([s.gt for s in samples]),
        "edge": stack_masks([s.edge for s in samples]),
    }
