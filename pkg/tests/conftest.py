from __future__ import annotations

import numpy as np
import pytest
import torch

from vdtsal.synth import DegradationSpec, SynthConfig, synthesize_dataset


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


def make_synth_config(num_samples=6, resolution=32, seed=0, split="train", **spec_overrides):
    """SynthConfig with optional per-modality degradation, e.g.
    depth=dict(drop_object_prob=0.5)."""
    specs = {}
    for name in ("visible", "depth", "thermal"):
        specs[name] = DegradationSpec(**spec_overrides.get(name, {}))
    return SynthConfig(num_samples=num_samples, resolution=resolution,
                       seed=seed, split=split, **specs)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Six clean 32 px samples, shared by tests that only need valid data."""
    root = tmp_path_factory.mktemp("tinydata")
    cfg = make_synth_config(num_samples=6, resolution=32, seed=11)
    synthesize_dataset(cfg, root)
    return root


def random_mask(rng, shape):
    """Binary mask guaranteed to contain both labels."""
    while True:
        m = (rng.random(shape) < rng.uniform(0.2, 0.8)).astype(np.float64)
        if 0.0 < m.mean() < 1.0:
            return m
