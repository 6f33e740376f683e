"""Multi-reference customization generator: flow matching, UNet, training and sampling."""

from .flow import cfg_combine, flow_interpolate, sample_ode, velocity_target
from .pipeline import generate, generate_manifest
from .training import (
    TrainBatch,
    TrainConfig,
    TrainExample,
    adapt_reference_count,
    augment_references,
    lr_at,
    rfm_loss,
    train_loop,
)
from .unet import MRCConfig, MRCUNet

__all__ = [
    "MRCConfig",
    "MRCUNet",
    "TrainBatch",
    "TrainConfig",
    "TrainExample",
    "adapt_reference_count",
    "augment_references",
    "cfg_combine",
    "flow_interpolate",
    "generate",
    "generate_manifest",
    "lr_at",
    "rfm_loss",
    "sample_ode",
    "train_loop",
    "velocity_target",
]
