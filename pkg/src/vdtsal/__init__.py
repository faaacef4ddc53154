"""Quality-aware selective fusion for visible-depth-thermal salient object
detection: synthetic data, three-stage training, prediction and evaluation."""

from .config import ConfigMap, load_config, parse_config_text
from .data import TripleModalSample, batch_to_tensors, discover_dataset, load_sample
from .errors import (ConfigError, DataError, DecodeError, EmptyDatasetError,
                     HeadDivisibilityError, MissingCheckpointError,
                     MissingModalityError, MissingPredictionError,
                     NonFiniteLossError, ResolutionError, ShapeMismatchError,
                     UnknownScopeError, VdtsalError)
from .losses import LossReport, ppa_loss, stage1_loss, stage2_loss, stage3_loss
from .metrics import MetricsReport, SampleMetrics, evaluate_directory, evaluate_pair
from .model import ModelConfig, SelectiveFusionNet
from .quality import build_pseudo_targets, quality_targets
from .synth import SynthConfig, synthesize_dataset
from .trainer import (TrainConfig, TrainResult, export_pseudo_targets,
                      load_checkpoint, predict, save_checkpoint, train_stage)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ConfigMap", "DataError", "DecodeError", "EmptyDatasetError",
    "HeadDivisibilityError", "LossReport", "MetricsReport", "MissingCheckpointError",
    "MissingModalityError", "MissingPredictionError", "ModelConfig",
    "NonFiniteLossError", "ResolutionError", "SampleMetrics", "SelectiveFusionNet",
    "ShapeMismatchError", "SynthConfig", "TrainConfig", "TrainResult",
    "TripleModalSample", "UnknownScopeError", "VdtsalError", "batch_to_tensors",
    "build_pseudo_targets", "discover_dataset", "evaluate_directory",
    "evaluate_pair", "export_pseudo_targets", "load_checkpoint", "load_config",
    "load_sample", "parse_config_text", "ppa_loss", "predict", "quality_targets",
    "save_checkpoint", "stage1_loss", "stage2_loss", "stage3_loss",
    "synthesize_dataset", "train_stage",
]
