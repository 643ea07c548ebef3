"""Masked-autoencoder pre-training with asymmetric tube masks and serial
feature distillation, on a self-contained numpy gradient tape."""

from .config import ConfigError, RunConfig, load_config, preset
from .distill import (
    AlignmentConfig,
    BatchItem,
    LossBreakdown,
    ModelBundle,
    build_bundle,
    distill_objective,
    map_layers,
)
from .masking import MaskPair, sample_asymmetric_pair, sample_tube_mask, set_diff
from .network import DecoderConfig, EncoderConfig, GeneratorConfig
from .numcore import Graph, Tensor, apply, backward, finite_difference_gradient
from .tokens import ClipSpec, TokenGrid, cube_embed, normalize_target, sinusoidal_pe
from .trainer import distill, evaluate_alignment, lr_schedule, pretrain_teacher, synthesize_clip

__all__ = [
    "AlignmentConfig",
    "BatchItem",
    "ClipSpec",
    "ConfigError",
    "DecoderConfig",
    "EncoderConfig",
    "GeneratorConfig",
    "Graph",
    "LossBreakdown",
    "MaskPair",
    "ModelBundle",
    "RunConfig",
    "Tensor",
    "TokenGrid",
    "apply",
    "backward",
    "build_bundle",
    "cube_embed",
    "distill",
    "distill_objective",
    "evaluate_alignment",
    "finite_difference_gradient",
    "load_config",
    "lr_schedule",
    "map_layers",
    "normalize_target",
    "preset",
    "pretrain_teacher",
    "sample_asymmetric_pair",
    "sample_tube_mask",
    "set_diff",
    "sinusoidal_pe",
    "synthesize_clip",
]
