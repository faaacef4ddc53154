"""Three-stage training, checkpointing, prediction and pseudo-target export.

Stage 1 trains the extraction subnet on all nine initial maps. Stage 2
freezes it, builds pseudo quality targets from its deepest maps on the fly,
and trains the quality subnet. Stage 3 freezes the quality subnet and trains
extraction and fusion jointly. Checkpoints store exactly the subnets the
completed stages own, so provenance is auditable from the file alone.
"""

from __future__ import annotations

import dataclasses
import os
import time

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .data import (TripleModalSample, augment_sample, batch_to_tensors,
                   discover_dataset, list_prediction_inputs, load_modalities,
                   load_sample)
from .errors import (ConfigError, MissingCheckpointError, NonFiniteLossError,
                     UnknownScopeError)
from .losses import (baseline_loss, boundary_weight_kernel, stage1_loss,
                     stage2_loss, stage3_loss)
from .model import ModelConfig, SelectiveFusionNet
from .quality import quality_targets

CHECKPOINT_FORMAT = 1
SCOPES = ("extraction", "quality", "fusion")
_TRAIN_ONLY_KEYS = frozenset({
    "checkpoint_out", "steps", "batch_size", "learning_rate", "seed",
    "scale_preset", "ablation", "cascade_order", "base_modality", "augment",
    "loss_log", "pretrained_path",
})


@dataclasses.dataclass
class TrainConfig:
    data_root: str
    checkpoint_out: str
    split: str = "train"
    resolution: int = 64
    batch_size: int = 4
    learning_rate: float = 1e-3
    steps: int = 150
    seed: int = 0
    scale_preset: str = "toy"
    ablation: str = "full"
    cascade_order: str = "descending"
    base_modality: str = "v"
    augment: bool = False
    checkpoint_in: str | None = None
    loss_log: str | None = None
    pretrained_path: str | None = None

    def model_config(self):
        return ModelConfig(
            scale_preset=self.scale_preset,
            ablation=self.ablation,
            cascade_order=self.cascade_order,
            base_modality=self.base_modality,
        )

    def validate(self, stage):
        if stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2 or 3, got {stage}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.steps < 1:
            raise ConfigError("steps must be positive")
        if self.resolution < 32 or self.resolution % 32:
            raise ConfigError("resolution must be >= 32 and divisible by 32")
        model_cfg = self.model_config()
        model_cfg.validate()
        if stage == 2 and not model_cfg.has_quality():
            raise ConfigError(f"stage 2 is undefined for ablation {self.ablation!r}")
        if stage == 3 and not model_cfg.has_fusion():
            raise ConfigError(f"stage 3 is undefined for ablation {self.ablation!r}")
        if stage >= 2 and not self.checkpoint_in:
            raise ConfigError(f"stage {stage} needs checkpoint_in")

    @classmethod
    def from_config(cls, cfg):
        out = cls(
            data_root=cfg.get_str("data_root", required=True),
            checkpoint_out=cfg.get_str("checkpoint_out", required=True),
            split=cfg.get_str("split", "train"),
            resolution=cfg.get_int("resolution", 64),
            batch_size=cfg.get_int("batch_size", 4),
            learning_rate=cfg.get_float("learning_rate", 1e-3),
            steps=cfg.get_int("steps", 150),
            seed=cfg.get_int("seed", 0),
            scale_preset=cfg.get_str("scale_preset", "toy"),
            ablation=cfg.get_str("ablation", "full"),
            cascade_order=cfg.get_str("cascade_order", "descending"),
            base_modality=cfg.get_str("base_modality", "v"),
            augment=cfg.get_bool("augment", False),
            checkpoint_in=cfg.get_str("checkpoint_in"),
            loss_log=cfg.get_str("loss_log"),
            pretrained_path=cfg.get_str("pretrained_path"),
        )
        unused = cfg.unused_keys()
        if unused:
            raise ConfigError(f"{cfg.source}: unknown keys {unused}")
        return out


@dataclasses.dataclass
class TrainResult:
    stage: int
    steps: int
    checkpoint_path: str
    loss_log_path: str
    totals: list
    duration_s: float


def save_checkpoint(path, model, stages, resolution, step):
    """Persist the subnets owned by the completed stages, plus metadata."""
    state = model.state_dict()
    scopes = _scopes_for(model.cfg, max(stages))
    kept = {k: v for k, v in state.items() if k.split(".", 1)[0] in scopes}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "stages": sorted(stages),
        "model_config": model.cfg.to_dict(),
        "resolution": resolution,
        "step": step,
        "model_state": kept,
    }
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path):
    if not path or not os.path.isfile(path):
        raise MissingCheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise MissingCheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    for key in ("format", "stages", "model_config", "model_state", "resolution"):
        if key not in payload:
            raise MissingCheckpointError(f"checkpoint {path} lacks {key!r}")
    return payload


def _scopes_for(model_cfg, stage):
    if model_cfg.ablation == "base":
        return ("extraction",)
    scopes = ["extraction"]
    if stage >= 2 and model_cfg.has_quality():
        scopes.append("quality")
    if stage >= 3:
        scopes.append("fusion")
    return tuple(scopes)


def _load_scopes(model, payload, scopes):
    state = payload["model_state"]
    for scope in scopes:
        module = getattr(model, scope, None)
        if module is None:
            raise MissingCheckpointError(f"model has no {scope!r} subnet to load")
        prefix = scope + "."
        sub = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
        if not sub:
            raise MissingCheckpointError(f"checkpoint lacks {scope!r} parameters")
        module.load_state_dict(sub, strict=True)


def freeze_scope(model, scopes):
    """Disable gradients for whole subnets, addressed by attribute name."""
    if isinstance(scopes, str):
        scopes = (scopes,)
    for scope in scopes:
        if scope not in SCOPES or getattr(model, scope, None) is None:
            raise UnknownScopeError(f"unknown freeze scope {scope!r}")
        getattr(model, scope).requires_grad_(False)


def _check_compatible(cfg, payload):
    prior = payload["model_config"]
    if prior.get("scale_preset") != cfg.scale_preset:
        raise ConfigError(
            f"checkpoint was trained with scale_preset={prior.get('scale_preset')!r}, "
            f"config says {cfg.scale_preset!r}")


def _require_stages(payload, needed, path):
    have = set(payload["stages"])
    if not set(needed) <= have:
        raise MissingCheckpointError(
            f"checkpoint {path} has stages {sorted(have)}, need {sorted(needed)}")


def _batch_indices(num_samples, batch_size, rng):
    order = []
    while True:
        while len(order) < batch_size:
            order.extend(rng.permutation(num_samples).tolist())
        yield order[:batch_size]
        order = order[batch_size:]


def _stage_modes(model, stage):
    """Train mode for the subnets being optimized, eval for frozen ones so
    normalization buffers stay untouched."""
    model.train()
    if stage == 2:
        model.extraction.eval()
        if model.fusion is not None:
            model.fusion.eval()
    elif stage == 3 and model.quality is not None:
        model.quality.eval()


def _stage2_targets(model, batch, ablation):
    with torch.no_grad():
        initial = model.forward_initial(batch["visible"], batch["depth"], batch["thermal"])
        targets = quality_targets(initial, batch["gt"])
    if ablation == "no_lq":
        return targets["d"].high, targets["t"].high
    if ablation == "no_hq":
        return targets["d"].low, targets["t"].low
    return targets["d"].combined, targets["t"].combined


def _forward_loss(model, batch, stage, cfg, kernel):
    if cfg.ablation == "base":
        initial = model.forward_initial(batch["visible"], batch["depth"], batch["thermal"])
        return baseline_loss(initial["base"], batch["gt"], kernel)
    if stage == 1:
        initial = model.forward_initial(batch["visible"], batch["depth"], batch["thermal"])
        return stage1_loss(initial, batch["gt"], kernel)
    if stage == 2:
        target_d, target_t = _stage2_targets(model, batch, cfg.ablation)
        qa_d, qa_t = model.forward_quality(batch["visible"], batch["depth"], batch["thermal"])
        return stage2_loss(qa_d, qa_t, target_d, target_t)
    initial, _, fusion_out = model.forward_fused(
        batch["visible"], batch["depth"], batch["thermal"], detach_quality=True)
    edge_small = F.max_pool2d(batch["edge"], kernel_size=4)
    return stage3_loss(initial, fusion_out, batch["gt"], edge_small, kernel)


def _refresh_norm_stats(model, samples, stage, cfg):
    """Re-estimate the BatchNorm running stats of the subnets that just
    trained with one pass over the data under the final weights. Small-batch
    training leaves the stats a step behind the weights, and the
    multiplicative decoder blocks turn that small mismatch into an eval-time
    blowup."""
    _stage_modes(model, stage)
    norms = [m for m in model.modules()
             if isinstance(m, nn.BatchNorm2d) and m.training]
    if not norms:
        return
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None  # cumulative average over the sweep
    with torch.no_grad():
        for first in range(0, len(samples), cfg.batch_size):
            picked = samples[first:first + cfg.batch_size]
            if len(picked) == 1 and len(samples) > 1:
                continue  # a lone sample gives no batch variance
            batch = batch_to_tensors(picked)
            if cfg.ablation == "base" or stage == 1:
                model.forward_initial(batch["visible"], batch["depth"], batch["thermal"])
            elif stage == 2:
                model.forward_quality(batch["visible"], batch["depth"], batch["thermal"])
            else:
                model.forward_fused(batch["visible"], batch["depth"], batch["thermal"],
                                    detach_quality=True)
    for m, momentum in zip(norms, saved):
        m.momentum = momentum
    model.eval()


def train_stage(cfg, stage):
    cfg.validate(stage)
    start = time.time()
    torch.manual_seed(cfg.seed * 1000 + stage)

    model_cfg = cfg.model_config()
    model = SelectiveFusionNet(model_cfg)

    completed = {stage}
    if stage == 1:
        if cfg.pretrained_path:
            model.extraction.encoder.load_weights(cfg.pretrained_path)
        trainable = ("extraction",)
        frozen = ()
    elif stage == 2:
        payload = load_checkpoint(cfg.checkpoint_in)
        _check_compatible(cfg, payload)
        _require_stages(payload, {1}, cfg.checkpoint_in)
        _load_scopes(model, payload, ("extraction",))
        completed |= set(payload["stages"])
        trainable = ("quality",)
        frozen = ("extraction",)
    else:
        payload = load_checkpoint(cfg.checkpoint_in)
        _check_compatible(cfg, payload)
        if model_cfg.has_quality():
            _require_stages(payload, {1, 2}, cfg.checkpoint_in)
            _load_scopes(model, payload, ("extraction", "quality"))
            frozen = ("quality",)
        else:
            _require_stages(payload, {1}, cfg.checkpoint_in)
            _load_scopes(model, payload, ("extraction",))
            frozen = ()
        completed |= set(payload["stages"])
        trainable = ("extraction", "fusion")

    if frozen:
        freeze_scope(model, frozen)

    manifest = discover_dataset(cfg.data_root, cfg.split)
    samples = [load_sample(entry, cfg.resolution) for entry in manifest.entries]

    params = []
    for scope in trainable:
        params.extend(getattr(model, scope).parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)

    kernel = boundary_weight_kernel(cfg.resolution)
    sample_rng = np.random.default_rng([cfg.seed, stage, 1])
    augment_rng = np.random.default_rng([cfg.seed, stage, 2])
    batches = _batch_indices(len(samples), cfg.batch_size, sample_rng)

    rows = []
    totals = []
    for step in range(cfg.steps):
        picked = [samples[i] for i in next(batches)]
        if cfg.augment:
            picked = [augment_sample(s, augment_rng) for s in picked]
        batch = batch_to_tensors(picked)
        _stage_modes(model, stage)
        report = _forward_loss(model, batch, stage, cfg, kernel)
        if not report.check_finite():
            raise NonFiniteLossError(step, report.components)
        optimizer.zero_grad()
        report.total.backward()
        optimizer.step()
        total = float(report.total.detach())
        totals.append(total)
        for name, value in report.components.items():
            rows.append((step, name, value))
        rows.append((step, "total", total))

    loss_log = cfg.loss_log or cfg.checkpoint_out + ".loss.csv"
    parent = os.path.dirname(os.path.abspath(loss_log))
    os.makedirs(parent, exist_ok=True)
    with open(loss_log, "w", encoding="utf-8") as fh:
        fh.write("step,component,value\n")
        for step, name, value in rows:
            fh.write(f"{step},{name},{value:.10e}\n")

    _refresh_norm_stats(model, samples, stage, cfg)
    save_checkpoint(cfg.checkpoint_out, model, completed, cfg.resolution, cfg.steps)
    return TrainResult(
        stage=stage,
        steps=cfg.steps,
        checkpoint_path=cfg.checkpoint_out,
        loss_log_path=loss_log,
        totals=totals,
        duration_s=time.time() - start,
    )


def _build_from_checkpoint(payload):
    model_cfg = ModelConfig.from_dict(payload["model_config"])
    model = SelectiveFusionNet(model_cfg)
    scopes = _scopes_for(model_cfg, max(payload["stages"]))
    _load_scopes(model, payload, scopes)
    model.eval()
    return model, model_cfg


def _save_map_png(path, prob):
    arr = np.round(prob * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def predict(checkpoint_path, input_dir, output_dir):
    """Write the deployment map per sample as an 8-bit PNG at the sample's
    native resolution."""
    payload = load_checkpoint(checkpoint_path)
    model, model_cfg = _build_from_checkpoint(payload)
    terminal = 1 if model_cfg.ablation == "base" else 3
    _require_stages(payload, {terminal}, checkpoint_path)
    resolution = payload["resolution"]

    entries = list_prediction_inputs(input_dir)
    os.makedirs(output_dir, exist_ok=True)
    written = []
    with torch.no_grad():
        for entry in entries:
            visible, depth, thermal, native = load_modalities(entry, resolution)
            batch = batch_to_tensors([_as_sample(entry.sample_id, visible, depth, thermal)])
            prob = model.predict_map(batch["visible"], batch["depth"], batch["thermal"])
            if tuple(prob.shape[-2:]) != tuple(native):
                prob = F.interpolate(prob, size=native, mode="bilinear", align_corners=False)
            out_path = os.path.join(output_dir, entry.sample_id + ".png")
            _save_map_png(out_path, prob.squeeze(0).squeeze(0).numpy())
            written.append(out_path)
    return written


def _as_sample(sample_id, visible, depth, thermal):
    h, w = visible.shape[:2]
    zero = np.zeros((h, w), dtype=np.float32)
    return TripleModalSample(sample_id, visible, depth, thermal, zero, zero, (h, w))


def export_pseudo_targets(cfg_map, out_dir):
    """Write the pseudo quality targets and the predicted quality maps as 8-bit
    PNGs for visual audit. Needs a checkpoint with stages 1 and 2."""
    data_root = cfg_map.get_str("data_root", required=True)
    checkpoint_in = cfg_map.get_str("checkpoint_in", required=True)
    split = cfg_map.get_str("split", "train")
    resolution = cfg_map.get_int("resolution", 0)
    # Tolerate leftover training keys so the stage-2 config file can be reused.
    unused = set(cfg_map.unused_keys()) - _TRAIN_ONLY_KEYS
    if unused:
        raise ConfigError(f"{cfg_map.source}: unknown keys {sorted(unused)}")

    payload = load_checkpoint(checkpoint_in)
    _require_stages(payload, {1, 2}, checkpoint_in)
    model, _ = _build_from_checkpoint(payload)
    resolution = resolution or payload["resolution"]

    manifest = discover_dataset(data_root, split)
    for sub in ("PGT_D", "PGT_T", "QA_D", "QA_T"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    with torch.no_grad():
        for entry in manifest.entries:
            sample = load_sample(entry, resolution)
            batch = batch_to_tensors([sample])
            initial = model.forward_initial(batch["visible"], batch["depth"], batch["thermal"])
            targets = quality_targets(initial, batch["gt"])
            qa_d, qa_t = model.forward_quality(batch["visible"], batch["depth"], batch["thermal"])
            outs = {
                "PGT_D": targets["d"].combined,
                "PGT_T": targets["t"].combined,
                "QA_D": qa_d,
                "QA_T": qa_t,
            }
            for sub, tensor in outs.items():
                path = os.path.join(out_dir, sub, entry.sample_id + ".png")
                _save_map_png(path, tensor.squeeze(0).squeeze(0).numpy())
    return out_dir
