"""Compact crowd-counting CNN: density ground truth, numpy training core, evaluation and benchmarking."""
from .density import DensityMap, HeadAnnotations, KernelSpec, downsample_preserving_count, render_density
from .model import CCNNConfig, ModelParams, ablation_variant, build, count_parameters, forward
from .train import Metrics, TrainConfig, evaluate, train

__all__ = [
    "CCNNConfig",
    "DensityMap",
    "HeadAnnotations",
    "KernelSpec",
    "Metrics",
    "ModelParams",
    "TrainConfig",
    "ablation_variant",
    "build",
    "count_parameters",
    "downsample_preserving_count",
    "evaluate",
    "forward",
    "render_density",
    "train",
]
