"""Blockwise self-supervised training engine.

A small numpy-backed stack for training convolutional encoders whose
blocks learn from local objectives instead of a single end-to-end loss.
Sub-modules are intentionally layered: ``tensor`` (autograd core),
``layers`` (network modules), ``pooling``, ``losses``, ``augment``,
``optim``, ``data``, ``trainer``, ``evaluate``, ``experiments``, ``cli``.
"""

from .augment import ViewPipeline, generate_view_batch, stream
from .config import (AugmentationConfig, ExperimentConfig, HeadConfig,
                     NoiseConfig, OptimizerConfig, RegimeConfig,
                     RoutingConfig, config_from_json, config_to_json,
                     desk_config, get_preset, load_config)
from .data import Dataset, DatasetDescriptor, load_dataset
from .evaluate import (block_features, correlation_diagnostics,
                       corruption_eval, linear_probe, probe_report)
from .experiments import emit_plotdata, run_experiment, run_preset
from .layers import BlockSpec, Encoder, EncoderSpec
from .losses import (barlow_twins, barlow_twins_loss, block_loss,
                     cross_correlation, simclr_loss, supervised_ce_loss,
                     vicreg, vicreg_loss)
from .optim import LARS, SGD, CosineSchedule
from .pooling import PoolingConfig, build_pooling, gsp, lsp
from .tensor import Tensor, batchnorm_train, concat, conv2d, no_grad, stop_gradient
from .trainer import TrainResult, Trainer, train

__all__ = [
    "AugmentationConfig", "BlockSpec", "CosineSchedule", "Dataset",
    "DatasetDescriptor", "Encoder", "EncoderSpec", "ExperimentConfig",
    "HeadConfig", "LARS", "NoiseConfig", "OptimizerConfig", "PoolingConfig",
    "RegimeConfig", "RoutingConfig", "SGD", "Tensor", "TrainResult",
    "Trainer", "ViewPipeline", "barlow_twins", "barlow_twins_loss",
    "batchnorm_train", "block_features", "block_loss", "build_pooling",
    "concat", "config_from_json", "config_to_json", "conv2d",
    "correlation_diagnostics", "corruption_eval", "cross_correlation",
    "desk_config", "emit_plotdata", "generate_view_batch", "get_preset",
    "gsp", "linear_probe", "load_config", "load_dataset", "lsp", "no_grad",
    "probe_report", "run_experiment", "run_preset", "simclr_loss",
    "stop_gradient", "stream", "supervised_ce_loss", "train", "vicreg",
    "vicreg_loss",
]
__version__ = "0.1.0"
