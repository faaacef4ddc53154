from __future__ import annotations

import csv
import os

import numpy as np
import pytest
import torch
from PIL import Image

import vdtsal.trainer as trainer_mod
from vdtsal.config import ConfigMap
from vdtsal.errors import (ConfigError, MissingCheckpointError,
                           NonFiniteLossError, UnknownScopeError)
from vdtsal.losses import LossReport
from vdtsal.model import ModelConfig, SelectiveFusionNet
from vdtsal.trainer import (TrainConfig, export_pseudo_targets, freeze_scope,
                            load_checkpoint, predict, save_checkpoint,
                            train_stage)


def _cfg(data_root, out, steps=2, **kw):
    kw.setdefault("resolution", 32)
    kw.setdefault("batch_size", 2)
    return TrainConfig(data_root=str(data_root), checkpoint_out=str(out),
                       steps=steps, **kw)


def _read_loss_csv(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert rows and set(rows[0]) == {"step", "component", "value"}
    return rows


def test_train_config_validation(tmp_path):
    cfg = _cfg(tmp_path, tmp_path / "c.pt")
    cfg.validate(1)
    with pytest.raises(ConfigError, match="stage must be"):
        cfg.validate(4)
    with pytest.raises(ConfigError, match="needs checkpoint_in"):
        cfg.validate(2)
    with pytest.raises(ConfigError, match="divisible by 32"):
        _cfg(tmp_path, tmp_path / "c.pt", resolution=48).validate(1)
    with pytest.raises(ConfigError, match="batch_size"):
        _cfg(tmp_path, tmp_path / "c.pt", batch_size=0).validate(1)

    for ablation in ("base", "no_qa"):
        bad = _cfg(tmp_path, tmp_path / "c.pt", ablation=ablation,
                   checkpoint_in=str(tmp_path / "in.pt"))
        with pytest.raises(ConfigError, match="stage 2 is undefined"):
            bad.validate(2)
    with pytest.raises(ConfigError, match="stage 3 is undefined"):
        _cfg(tmp_path, tmp_path / "c.pt", ablation="base",
             checkpoint_in=str(tmp_path / "in.pt")).validate(3)


def test_train_config_from_config_rejects_unknown_keys(tmp_path):
    cfg_map = ConfigMap({"data_root": "d", "checkpoint_out": "c.pt", "oops": "1"})
    with pytest.raises(ConfigError, match="unknown keys"):
        TrainConfig.from_config(cfg_map)
    ok = TrainConfig.from_config(ConfigMap({
        "data_root": "d", "checkpoint_out": "c.pt",
        "steps": "7", "learning_rate": "0.01", "augment": "true",
    }))
    assert ok.steps == 7
    assert ok.learning_rate == 0.01
    assert ok.augment is True


def test_freeze_scope(tmp_path):
    model = SelectiveFusionNet(ModelConfig(scale_preset="toy"))
    freeze_scope(model, "quality")
    assert all(not p.requires_grad for p in model.quality.parameters())
    assert any(p.requires_grad for p in model.extraction.parameters())
    with pytest.raises(UnknownScopeError):
        freeze_scope(model, "decoder")
    base = SelectiveFusionNet(ModelConfig(scale_preset="toy", ablation="base"))
    with pytest.raises(UnknownScopeError):
        freeze_scope(base, "quality")


def test_checkpoint_roundtrip_and_scope_content(tmp_path):
    model = SelectiveFusionNet(ModelConfig(scale_preset="toy"))
    path = str(tmp_path / "ck.pt")
    save_checkpoint(path, model, stages={1}, resolution=32, step=5)
    payload = load_checkpoint(path)
    assert payload["stages"] == [1]
    assert payload["resolution"] == 32
    prefixes = {k.split(".", 1)[0] for k in payload["model_state"]}
    assert prefixes == {"extraction"}

    save_checkpoint(path, model, stages={1, 2}, resolution=32, step=5)
    payload = load_checkpoint(path)
    assert {k.split(".", 1)[0] for k in payload["model_state"]} == {"extraction", "quality"}

    save_checkpoint(path, model, stages={1, 2, 3}, resolution=32, step=5)
    payload = load_checkpoint(path)
    assert {k.split(".", 1)[0] for k in payload["model_state"]} == {
        "extraction", "quality", "fusion"}


def test_load_checkpoint_missing_or_corrupt(tmp_path):
    with pytest.raises(MissingCheckpointError, match="not found"):
        load_checkpoint(str(tmp_path / "none.pt"))
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"garbage")
    with pytest.raises(MissingCheckpointError, match="cannot read"):
        load_checkpoint(str(bad))
    incomplete = tmp_path / "inc.pt"
    torch.save({"format": 1}, incomplete)
    with pytest.raises(MissingCheckpointError, match="lacks"):
        load_checkpoint(str(incomplete))


def _state_blobs(payload, scope):
    return {k: v for k, v in payload["model_state"].items() if k.startswith(scope + ".")}


def test_three_stage_pipeline_freezes_earlier_stages(tiny_dataset, tmp_path):
    s1 = _cfg(tiny_dataset, tmp_path / "s1.pt", steps=2, seed=3)
    train_stage(s1, 1)
    p1 = load_checkpoint(str(tmp_path / "s1.pt"))
    assert p1["stages"] == [1]

    s2 = _cfg(tiny_dataset, tmp_path / "s2.pt", steps=2, seed=3,
              checkpoint_in=str(tmp_path / "s1.pt"))
    train_stage(s2, 2)
    p2 = load_checkpoint(str(tmp_path / "s2.pt"))
    assert p2["stages"] == [1, 2]
    ext1, ext2 = _state_blobs(p1, "extraction"), _state_blobs(p2, "extraction")
    assert ext1.keys() == ext2.keys()
    for key in ext1:
        assert torch.equal(ext1[key], ext2[key]), f"stage 2 modified {key}"

    s3 = _cfg(tiny_dataset, tmp_path / "s3.pt", steps=2, seed=3,
              checkpoint_in=str(tmp_path / "s2.pt"))
    result = train_stage(s3, 3)
    p3 = load_checkpoint(str(tmp_path / "s3.pt"))
    assert p3["stages"] == [1, 2, 3]
    q2, q3 = _state_blobs(p2, "quality"), _state_blobs(p3, "quality")
    for key in q2:
        assert torch.equal(q2[key], q3[key]), f"stage 3 modified {key}"
    ext3 = _state_blobs(p3, "extraction")
    assert any(not torch.equal(ext2[k], ext3[k]) for k in ext2), \
        "stage 3 must retrain extraction"
    assert len(result.totals) == 2

    rows = _read_loss_csv(result.loss_log_path)
    steps = sorted({int(r["step"]) for r in rows})
    assert steps == [0, 1]
    by_step = {}
    for r in rows:
        by_step.setdefault(int(r["step"]), {})[r["component"]] = float(r["value"])
    for components in by_step.values():
        total = components.pop("total")
        assert len(components) == 14
        assert total == pytest.approx(sum(components.values()), abs=1e-6)


def test_stage_prerequisites_enforced(tiny_dataset, tmp_path):
    s1 = _cfg(tiny_dataset, tmp_path / "s1.pt", steps=1)
    train_stage(s1, 1)
    s3 = _cfg(tiny_dataset, tmp_path / "s3.pt", steps=1,
              checkpoint_in=str(tmp_path / "s1.pt"))
    with pytest.raises(MissingCheckpointError, match="need \\[1, 2\\]"):
        train_stage(s3, 3)


def test_no_qa_stage3_accepts_stage1_checkpoint(tiny_dataset, tmp_path):
    s1 = _cfg(tiny_dataset, tmp_path / "s1.pt", steps=1)
    train_stage(s1, 1)
    s3 = _cfg(tiny_dataset, tmp_path / "s3.pt", steps=1, ablation="no_qa",
              checkpoint_in=str(tmp_path / "s1.pt"))
    result = train_stage(s3, 3)
    payload = load_checkpoint(result.checkpoint_path)
    assert payload["stages"] == [1, 3]
    assert {k.split(".", 1)[0] for k in payload["model_state"]} == {"extraction", "fusion"}


def test_base_ablation_trains_and_predicts(tiny_dataset, tmp_path):
    cfg = _cfg(tiny_dataset, tmp_path / "b.pt", steps=2, ablation="base",
               base_modality="t")
    result = train_stage(cfg, 1)
    rows = _read_loss_csv(result.loss_log_path)
    names = {r["component"] for r in rows}
    assert names == {"ppa_base", "total"}
    out = predict(result.checkpoint_path, str(tiny_dataset / "train"), str(tmp_path / "p"))
    assert len(out) == 6


def test_scale_preset_mismatch_is_a_config_error(tiny_dataset, tmp_path):
    s1 = _cfg(tiny_dataset, tmp_path / "s1.pt", steps=1)
    train_stage(s1, 1)
    s2 = _cfg(tiny_dataset, tmp_path / "s2.pt", steps=1, scale_preset="large",
              checkpoint_in=str(tmp_path / "s1.pt"))
    with pytest.raises(ConfigError, match="scale_preset"):
        train_stage(s2, 2)


def test_stage1_is_deterministic(tiny_dataset, tmp_path):
    a = train_stage(_cfg(tiny_dataset, tmp_path / "a.pt", steps=3, seed=9), 1)
    b = train_stage(_cfg(tiny_dataset, tmp_path / "b.pt", steps=3, seed=9), 1)
    assert open(a.loss_log_path).read() == open(b.loss_log_path).read()
    pa = load_checkpoint(a.checkpoint_path)["model_state"]
    pb = load_checkpoint(b.checkpoint_path)["model_state"]
    for key in pa:
        assert torch.equal(pa[key], pb[key]), key


def test_augment_changes_training_but_stays_deterministic(tiny_dataset, tmp_path):
    plain = train_stage(_cfg(tiny_dataset, tmp_path / "p.pt", steps=2, seed=1), 1)
    aug_a = train_stage(_cfg(tiny_dataset, tmp_path / "a.pt", steps=2, seed=1,
                             augment=True), 1)
    aug_b = train_stage(_cfg(tiny_dataset, tmp_path / "b.pt", steps=2, seed=1,
                             augment=True), 1)
    assert open(aug_a.loss_log_path).read() == open(aug_b.loss_log_path).read()
    assert open(plain.loss_log_path).read() != open(aug_a.loss_log_path).read()


def test_non_finite_loss_aborts_with_step(tiny_dataset, tmp_path, monkeypatch):
    real = trainer_mod._forward_loss
    calls = {"n": 0}

    def poisoned(model, batch, stage, cfg, kernel):
        report = real(model, batch, stage, cfg, kernel)
        calls["n"] += 1
        if calls["n"] == 2:
            bad = report.total * float("nan")
            return LossReport(total=bad, components={"ppa_v1": float("nan")})
        return report

    monkeypatch.setattr(trainer_mod, "_forward_loss", poisoned)
    with pytest.raises(NonFiniteLossError, match="step 1") as err:
        train_stage(_cfg(tiny_dataset, tmp_path / "x.pt", steps=4), 1)
    assert err.value.step == 1


def test_predict_restores_native_resolution(tiny_dataset, tmp_path):
    cfg = _cfg(tiny_dataset, tmp_path / "s1.pt", steps=1)
    train_stage(cfg, 1)
    s2 = _cfg(tiny_dataset, tmp_path / "s2.pt", steps=1, checkpoint_in=str(tmp_path / "s1.pt"))
    train_stage(s2, 2)
    s3 = _cfg(tiny_dataset, tmp_path / "s3.pt", steps=1, checkpoint_in=str(tmp_path / "s2.pt"))
    train_stage(s3, 3)

    # model trained at 32 px, inputs stored at 64 px: output must be 64 px
    from conftest import make_synth_config
    from vdtsal.synth import synthesize_dataset
    big = make_synth_config(num_samples=2, resolution=64, seed=5)
    split = synthesize_dataset(big, tmp_path / "bigdata")
    written = predict(str(tmp_path / "s3.pt"), str(split), str(tmp_path / "preds"))
    assert len(written) == 2
    with Image.open(written[0]) as img:
        assert img.size == (64, 64)
        assert img.mode == "L"

    with pytest.raises(MissingCheckpointError, match="need \\[3\\]"):
        predict(str(tmp_path / "s1.pt"), str(split), str(tmp_path / "preds2"))


def test_predict_is_byte_stable(tiny_dataset, tmp_path):
    train_stage(_cfg(tiny_dataset, tmp_path / "s1.pt", steps=1, ablation="no_qa"), 1)
    s3 = _cfg(tiny_dataset, tmp_path / "s3.pt", steps=1, ablation="no_qa",
              checkpoint_in=str(tmp_path / "s1.pt"))
    train_stage(s3, 3)
    a = predict(str(tmp_path / "s3.pt"), str(tiny_dataset / "train"), str(tmp_path / "pa"))
    b = predict(str(tmp_path / "s3.pt"), str(tiny_dataset / "train"), str(tmp_path / "pb"))
    for pa, pb in zip(a, b):
        assert open(pa, "rb").read() == open(pb, "rb").read()


def test_export_pseudo_targets(tiny_dataset, tmp_path):
    train_stage(_cfg(tiny_dataset, tmp_path / "s1.pt", steps=1), 1)
    train_stage(_cfg(tiny_dataset, tmp_path / "s2.pt", steps=1,
                     checkpoint_in=str(tmp_path / "s1.pt")), 2)
    cfg_map = ConfigMap({
        "data_root": str(tiny_dataset),
        "checkpoint_in": str(tmp_path / "s2.pt"),
    })
    out = export_pseudo_targets(cfg_map, str(tmp_path / "pgt"))
    for sub in ("PGT_D", "PGT_T", "QA_D", "QA_T"):
        names = sorted(os.listdir(os.path.join(out, sub)))
        assert len(names) == 6
        with Image.open(os.path.join(out, sub, names[0])) as img:
            assert img.size == (32, 32)

    thin = ConfigMap({"data_root": str(tiny_dataset),
                      "checkpoint_in": str(tmp_path / "s1.pt")})
    with pytest.raises(MissingCheckpointError, match="need \\[1, 2\\]"):
        export_pseudo_targets(thin, str(tmp_path / "pgt2"))
