"""Autoregressive precipitation downscaling with flow-warped residual diffusion."""

__version__ = "0.1.0"

from .data import NormSpec, PairedSequence, coarsen, denormalize, normalize
from .metrics import EnsembleForecast, MetricsReport, compute_report
from .nets import ArchConfig, DownscalingModel, EmaShadow, bicubic_upsample, build_model
from .pipeline import LossBreakdown, Pipeline, StepOutputs, set_ablation
from .schedule import DiffusionSchedule, build_schedule, ddim_subsequence
from .warp import bilinear_warp

__all__ = [
    "ArchConfig",
    "DiffusionSchedule",
    "DownscalingModel",
    "EmaShadow",
    "EnsembleForecast",
    "LossBreakdown",
    "MetricsReport",
    "NormSpec",
    "PairedSequence",
    "Pipeline",
    "StepOutputs",
    "bicubic_upsample",
    "bilinear_warp",
    "build_model",
    "build_schedule",
    "coarsen",
    "compute_report",
    "ddim_subsequence",
    "denormalize",
    "normalize",
    "set_ablation",
]
