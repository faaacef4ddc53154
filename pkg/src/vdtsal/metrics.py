"""Saliency evaluation metrics and directory-level reports.

Conventions, pinned once here:
  * predictions are 8-bit PNGs read as value / 255; GT binarizes at 128 / 255
  * threshold sweep uses the 255 values k / 255, k = 1..255, binarizing with >=
  * adaptive threshold is min(2 * mean(pred), 1)
  * eps = 1e-8; empty-numerator ratios (0/0) resolve to 0
  * E uses the plain pixel mean of the enhanced alignment matrix; the
    degenerate maps (GT all background / all foreground) score 1 - mean(pred_bin)
    and mean(pred_bin) respectively
  * S uses alpha = 0.5, population std in the object term, sample (n-1)
    variances in the region SSIM, 1-based rounded foreground centroid with
    half rounding up; GT all background scores 1 - mean(pred), all foreground
    mean(pred)
All math in float64.
"""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np
from PIL import Image

from .errors import MissingPredictionError

EPS = 1e-8
THRESHOLDS = np.arange(1, 256, dtype=np.float64) / 255.0
F_BETA2 = 0.3


def mae(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    return float(np.abs(pred - gt).mean())


def adaptive_threshold(pred):
    return min(2.0 * float(np.asarray(pred, dtype=np.float64).mean()), 1.0)


def _fscore(precision, recall):
    num = (1.0 + F_BETA2) * precision * recall
    den = F_BETA2 * precision + recall
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def _prf_from_counts(tp, fp, fn):
    tp = np.asarray(tp, dtype=np.float64)
    fp = np.asarray(fp, dtype=np.float64)
    fn = np.asarray(fn, dtype=np.float64)
    pred_pos = tp + fp
    gt_pos = tp + fn
    precision = np.divide(tp, pred_pos, out=np.zeros_like(tp), where=pred_pos > 0)
    recall = np.divide(tp, gt_pos, out=np.zeros_like(tp), where=gt_pos > 0)
    return precision, recall, _fscore(precision, recall)


def f_measure_curve(pred, gt):
    """Precision, recall and F over the 255 fixed thresholds."""
    pred = np.asarray(pred, dtype=np.float64)
    gtb = np.asarray(gt) > 0.5
    bins = pred[None, :, :] >= THRESHOLDS[:, None, None]
    tp = np.logical_and(bins, gtb).sum(axis=(1, 2))
    fp = np.logical_and(bins, ~gtb).sum(axis=(1, 2))
    fn = np.logical_and(~bins, gtb).sum(axis=(1, 2))
    return _prf_from_counts(tp, fp, fn)


def f_adaptive(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gtb = np.asarray(gt) > 0.5
    binary = pred >= adaptive_threshold(pred)
    tp = np.logical_and(binary, gtb).sum()
    fp = np.logical_and(binary, ~gtb).sum()
    fn = np.logical_and(~binary, gtb).sum()
    _, _, f = _prf_from_counts([tp], [fp], [fn])
    return float(f[0])


def enhanced_alignment(pred_bin, gt):
    """E for one binary map: mean of (1 + xi)^2 / 4 where xi is the alignment
    of the mean-centered maps."""
    pred_bin = np.asarray(pred_bin, dtype=np.float64)
    gtf = (np.asarray(gt) > 0.5).astype(np.float64)
    if not gtf.any():
        return float((1.0 - pred_bin).mean())
    if gtf.all():
        return float(pred_bin.mean())
    phi_g = gtf - gtf.mean()
    phi_p = pred_bin - pred_bin.mean()
    xi = 2.0 * phi_g * phi_p / (phi_g ** 2 + phi_p ** 2 + EPS)
    return float(((xi + 1.0) ** 2 / 4.0).mean())


def e_measure_curve(pred, gt, chunk=64):
    """E over the 255 fixed thresholds, vectorized over threshold chunks."""
    pred = np.asarray(pred, dtype=np.float64)
    gtf = (np.asarray(gt) > 0.5).astype(np.float64)
    out = np.empty(len(THRESHOLDS), dtype=np.float64)
    empty, full = not gtf.any(), gtf.all()
    phi_g = gtf - gtf.mean()
    for start in range(0, len(THRESHOLDS), chunk):
        ts = THRESHOLDS[start:start + chunk]
        bins = (pred[None, :, :] >= ts[:, None, None]).astype(np.float64)
        if empty:
            out[start:start + len(ts)] = (1.0 - bins).mean(axis=(1, 2))
        elif full:
            out[start:start + len(ts)] = bins.mean(axis=(1, 2))
        else:
            phi_p = bins - bins.mean(axis=(1, 2), keepdims=True)
            xi = 2.0 * phi_g[None] * phi_p / (phi_g[None] ** 2 + phi_p ** 2 + EPS)
            out[start:start + len(ts)] = ((xi + 1.0) ** 2 / 4.0).mean(axis=(1, 2))
    return out


def e_adaptive(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    binary = (pred >= adaptive_threshold(pred)).astype(np.float64)
    return enhanced_alignment(binary, gt)


def _object_score(values):
    x = values.mean()
    sigma = values.std()
    return 2.0 * x / (x * x + 1.0 + sigma + EPS)


def _s_object(pred, gtb):
    fg = _object_score(pred[gtb])
    bg = _object_score((1.0 - pred)[~gtb])
    u = gtb.mean()
    return u * fg + (1.0 - u) * bg


def _centroid(gtb):
    # 1-based rounded centroid of the foreground, half rounds up
    rows, cols = gtb.shape
    ys, xs = np.nonzero(gtb)
    cy = int(np.floor((ys + 1).mean() + 0.5))
    cx = int(np.floor((xs + 1).mean() + 0.5))
    return cy, cx


def _ssim_block(p, g):
    n = p.size
    if n == 0:
        return 0.0
    x, y = p.mean(), g.mean()
    if n > 1:
        sigma_x = ((p - x) ** 2).sum() / (n - 1)
        sigma_y = ((g - y) ** 2).sum() / (n - 1)
        sigma_xy = ((p - x) * (g - y)).sum() / (n - 1)
    else:
        sigma_x = sigma_y = sigma_xy = 0.0
    a = 4.0 * x * y * sigma_xy
    b = (x * x + y * y) * (sigma_x + sigma_y)
    if a != 0.0:
        return float(a / (b + EPS))
    if b == 0.0:
        return 1.0
    return 0.0


def _s_region(pred, gtb):
    rows, cols = gtb.shape
    cy, cx = _centroid(gtb)
    area = rows * cols
    gtf = gtb.astype(np.float64)
    w1 = (cx * cy) / area
    w2 = ((cols - cx) * cy) / area
    w3 = (cx * (rows - cy)) / area
    w4 = 1.0 - w1 - w2 - w3
    q1 = _ssim_block(pred[:cy, :cx], gtf[:cy, :cx])
    q2 = _ssim_block(pred[:cy, cx:], gtf[:cy, cx:])
    q3 = _ssim_block(pred[cy:, :cx], gtf[cy:, :cx])
    q4 = _ssim_block(pred[cy:, cx:], gtf[cy:, cx:])
    return w1 * q1 + w2 * q2 + w3 * q3 + w4 * q4


def s_measure(pred, gt, alpha=0.5):
    """Structure measure: alpha-blend of the object-aware and region-aware terms."""
    pred = np.asarray(pred, dtype=np.float64)
    gtb = np.asarray(gt) > 0.5
    y = gtb.mean()
    if y == 0.0:
        return float(1.0 - pred.mean())
    if y == 1.0:
        return float(pred.mean())
    score = alpha * _s_object(pred, gtb) + (1.0 - alpha) * _s_region(pred, gtb)
    return float(max(score, 0.0))


@dataclasses.dataclass
class SampleMetrics:
    mae: float
    s: float
    f_adp: float
    f_mean: float
    f_max: float
    e_adp: float
    e_mean: float
    e_max: float

    def as_dict(self):
        return {k: round(v, 6) for k, v in dataclasses.asdict(self).items()}


def evaluate_pair(pred, gt):
    """All metrics plus curves for one prediction/GT pair."""
    precision, recall, f_curve = f_measure_curve(pred, gt)
    e_curve = e_measure_curve(pred, gt)
    metrics = SampleMetrics(
        mae=mae(pred, gt),
        s=s_measure(pred, gt),
        f_adp=f_adaptive(pred, gt),
        f_mean=float(f_curve.mean()),
        f_max=float(f_curve.max()),
        e_adp=e_adaptive(pred, gt),
        e_mean=float(e_curve.mean()),
        e_max=float(e_curve.max()),
    )
    return metrics, {"precision": precision, "recall": recall, "f": f_curve, "e": e_curve}


@dataclasses.dataclass
class MetricsReport:
    num_samples: int
    per_sample: dict
    mean: SampleMetrics
    precision: np.ndarray
    recall: np.ndarray
    f_curve: np.ndarray
    tags: dict


def _mean_metrics(values):
    fields = [f.name for f in dataclasses.fields(SampleMetrics)]
    return SampleMetrics(**{
        f: float(np.mean([getattr(v, f) for v in values])) for f in fields
    })


def load_pred_png(path):
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float64) / 255.0


def load_gt_png(path):
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float64) >= 128.0


def _read_tags_file(path):
    tags = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            stem, _, raw = line.partition("\t")
            tags[stem] = tuple(t for t in raw.split(",") if t)
    return tags


def _resize_pred(pred, shape):
    img = Image.fromarray(np.round(pred * 255.0).astype(np.uint8))
    img = img.resize((shape[1], shape[0]), Image.Resampling.BILINEAR)
    return np.asarray(img, dtype=np.float64) / 255.0


def evaluate_directory(pred_dir, gt_dir, tags_path=None, report_path=None):
    """Evaluate every GT mask in gt_dir against pred_dir/<stem>.png.

    Writes a JSON report (values rounded to 6 decimals) and a threshold-curve
    CSV next to it when report_path is given."""
    stems = sorted(os.path.splitext(n)[0] for n in os.listdir(gt_dir) if n.lower().endswith(".png"))
    if not stems:
        raise MissingPredictionError(f"no ground-truth masks under {gt_dir}")
    tag_map = _read_tags_file(tags_path) if tags_path else {}

    per_sample = {}
    curve_stack = {"precision": [], "recall": [], "f": []}
    for stem in stems:
        pred_path = os.path.join(pred_dir, stem + ".png")
        if not os.path.isfile(pred_path):
            raise MissingPredictionError(f"no prediction for {stem!r} under {pred_dir}")
        gt = load_gt_png(os.path.join(gt_dir, stem + ".png"))
        pred = load_pred_png(pred_path)
        if pred.shape != gt.shape:
            pred = _resize_pred(pred, gt.shape)
        metrics, curves = evaluate_pair(pred, gt)
        per_sample[stem] = metrics
        for key in curve_stack:
            curve_stack[key].append(curves[key])

    mean = _mean_metrics(list(per_sample.values()))
    tag_groups = {}
    for stem in per_sample:
        for tag in tag_map.get(stem, ()):
            tag_groups.setdefault(tag, []).append(stem)
    tags = {
        tag: {"count": len(members), "mean": _mean_metrics([per_sample[m] for m in members])}
        for tag, members in sorted(tag_groups.items())
    }
    report = MetricsReport(
        num_samples=len(per_sample),
        per_sample=per_sample,
        mean=mean,
        precision=np.mean(curve_stack["precision"], axis=0),
        recall=np.mean(curve_stack["recall"], axis=0),
        f_curve=np.mean(curve_stack["f"], axis=0),
        tags=tags,
    )
    if report_path:
        write_report(report, report_path)
    return report


def write_report(report, path):
    payload = {
        "num_samples": report.num_samples,
        "mean": report.mean.as_dict(),
        "per_sample": {k: v.as_dict() for k, v in report.per_sample.items()},
        "tags": {
            tag: {"count": info["count"], "mean": info["mean"].as_dict()}
            for tag, info in report.tags.items()
        },
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    curves_path = os.path.splitext(path)[0] + ".curves.csv"
    with open(curves_path, "w", encoding="utf-8") as fh:
        fh.write("threshold,precision,recall,f\n")
        for t, p, r, f in zip(THRESHOLDS, report.precision, report.recall, report.f_curve):
            fh.write(f"{t:.6f},{p:.6f},{r:.6f},{f:.6f}\n")
