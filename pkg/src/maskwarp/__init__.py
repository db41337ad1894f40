"""Differentiable view synthesis, masked adversarial losses and evaluation tools."""

__version__ = "0.1.0"

from .estimator import SnippetDepthEstimator
from .evaluation import (
    DepthEvalReport,
    TrajEvalReport,
    Trajectory,
    chain_relative_poses,
    depth_metrics,
    kitti_odometry_errors,
    scale_align,
    umeyama_align,
)
from .exceptions import (
    ConfigError,
    DegenerateInputError,
    DimensionError,
    DomainError,
    NumericalError,
    RankDeficiencyError,
    SceneError,
)
from .geometry import DepthField, Intrinsics, PixelGrid, Pose6, compose, invert, project, project_grad
from .losses import (
    LossWeights,
    MaskField,
    apply_mask,
    boolean_mask,
    gan_losses,
    mask_regularization,
    masked_reconstruction_loss,
    reconstruction_loss,
    scale_consistency_loss,
    smoothness_loss,
    ssim_map,
    total_generator_loss,
)
from .sampling import WarpResult, bilinear_sample, warp_image
from .training import RunConfig, Snippet, TrainConfig, Trainer, train_step

__all__ = [
    "SnippetDepthEstimator",
    "DepthEvalReport", "TrajEvalReport", "Trajectory", "chain_relative_poses", "depth_metrics",
    "kitti_odometry_errors", "scale_align", "umeyama_align",
    "ConfigError", "DegenerateInputError", "DimensionError", "DomainError", "NumericalError",
    "RankDeficiencyError", "SceneError",
    "DepthField", "Intrinsics", "PixelGrid", "Pose6", "compose", "invert", "project", "project_grad",
    "LossWeights", "MaskField", "apply_mask", "boolean_mask", "gan_losses", "mask_regularization",
    "masked_reconstruction_loss", "reconstruction_loss", "scale_consistency_loss", "smoothness_loss",
    "ssim_map", "total_generator_loss",
    "WarpResult", "bilinear_sample", "warp_image",
    "RunConfig", "Snippet", "TrainConfig", "Trainer", "train_step",
]
