"""Full model assembly: extraction + quality + fusion, with ablation variants."""

from __future__ import annotations

import dataclasses

import torch
import torch.nn as nn

from .backbone import EncoderConfig
from .errors import ConfigError
from .extraction import BaselineBranch, InitialExtraction
from .fusion import SelectiveFusion
from .quality import QualityNet

ABLATIONS = ("full", "base", "no_qa", "no_lq", "no_hq", "no_attn", "no_er")


@dataclasses.dataclass
class ModelConfig:
    scale_preset: str = "toy"
    ablation: str = "full"
    cascade_order: str = "descending"
    base_modality: str = "v"
    decoder_channels: int = 128
    attention_heads: int = 4

    def validate(self):
        if self.scale_preset not in ("toy", "large"):
            raise ConfigError(f"scale_preset must be toy or large, got {self.scale_preset!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.cascade_order not in ("descending", "ascending"):
            raise ConfigError(f"cascade_order must be descending or ascending")
        if self.base_modality not in ("v", "d", "t"):
            raise ConfigError(f"base_modality must be v, d or t, got {self.base_modality!r}")
        if self.decoder_channels % self.attention_heads:
            raise ConfigError("decoder_channels must divide by attention_heads")

    def has_quality(self):
        return self.ablation not in ("base", "no_qa")

    def has_fusion(self):
        return self.ablation != "base"

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values):
        cfg = cls(**values)
        cfg.validate()
        return cfg


class SelectiveFusionNet(nn.Module):
    """Container for the three subnets. The training stages address them by the
    attribute names `extraction`, `quality` and `fusion`."""

    def __init__(self, cfg):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        encoder_cfg = EncoderConfig.preset(cfg.scale_preset)
        if cfg.ablation == "base":
            self.extraction = BaselineBranch(encoder_cfg, cfg.decoder_channels)
            self.quality = None
            self.fusion = None
            return
        self.extraction = InitialExtraction(encoder_cfg, cfg.decoder_channels)
        self.quality = QualityNet(cfg.scale_preset) if cfg.has_quality() else None
        self.fusion = SelectiveFusion(
            channels=cfg.decoder_channels,
            num_heads=cfg.attention_heads,
            cascade_order=cfg.cascade_order,
            use_attention=cfg.ablation != "no_attn",
            use_edge_refine=cfg.ablation != "no_er",
            use_high=cfg.ablation != "no_hq",
            use_low=cfg.ablation != "no_lq",
            sum_inputs=cfg.ablation == "no_qa",
        )

    def forward_initial(self, visible, depth, thermal):
        if self.cfg.ablation == "base":
            image = {"v": visible, "d": depth, "t": thermal}[self.cfg.base_modality]
            return {"base": self.extraction(image)}
        return self.extraction(visible, depth, thermal)

    def forward_quality(self, visible, depth, thermal):
        if self.quality is None:
            raise ConfigError(f"ablation {self.cfg.ablation!r} has no quality subnet")
        return self.quality(visible, depth, thermal)

    def forward_fused(self, visible, depth, thermal, detach_quality=False):
        """Stage-3 style forward. Returns (initial outputs, (qa_d, qa_t), fusion output).
        With detach_quality the quality maps are computed without graph."""
        initial = self.forward_initial(visible, depth, thermal)
        if self.quality is not None:
            if detach_quality:
                with torch.no_grad():
                    qa_d, qa_t = self.forward_quality(visible, depth, thermal)
            else:
                qa_d, qa_t = self.forward_quality(visible, depth, thermal)
        else:
            qa_d = qa_t = None
        fusion_out = self.fusion(
            initial["v"].features, initial["d"].features, initial["t"].features,
            qa_d, qa_t, visible.shape[-2:])
        return initial, (qa_d, qa_t), fusion_out

    def predict_map(self, visible, depth, thermal):
        """Deployment map in [0, 1] at input resolution."""
        if self.cfg.ablation == "base":
            return self.forward_initial(visible, depth, thermal)["base"].maps[0]
        _, _, fusion_out = self.forward_fused(visible, depth, thermal, detach_quality=True)
        return torch.sigmoid(fusion_out.final_logits)
