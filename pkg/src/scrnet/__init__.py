"""Ultrasound segmentation network with spatial gating, channel refinement and
conv/cross-attention feature aggregation, on a small numpy autodiff core."""

from .data import AugmentConfig, Sample, augment, load_dataset, split_dataset, synth_generate
from .model import (CheckpointError, ConfigError, ModelConfig, SCRNet, build_model, count_params, forward,
                    load_checkpoint, save_checkpoint)
from .nn_ops import ParameterStore
from .tensor import GradCheckReport, Parameter, ShapeError, Tensor, grad_check, no_grad
from .train import (LossConfig, MetricsReport, OptimState, adam_step, bce_loss, combined_loss, compute_metrics,
                    dice_loss, evaluate, lr_anneal, train_loop)

__all__ = [
    "AugmentConfig", "CheckpointError", "ConfigError", "GradCheckReport", "LossConfig", "MetricsReport",
    "ModelConfig", "OptimState", "Parameter", "ParameterStore", "SCRNet", "Sample", "ShapeError", "Tensor",
    "adam_step", "augment", "bce_loss", "build_model", "combined_loss", "compute_metrics", "count_params",
    "dice_loss", "evaluate", "forward", "grad_check", "load_checkpoint", "load_dataset", "lr_anneal", "no_grad",
    "save_checkpoint", "split_dataset", "synth_generate", "train_loop",
]
