"""Feed-forward human novel view synthesis."""

from ._cnvs import (
    ConfigError,
    Dataset,
    IoError,
    Model,
    NumericError,
    RunConfig,
    ScheduleError,
    distill,
    evaluate,
    full_attention,
    layout_at,
    linear_attention,
    make_dataset,
    orbit_pose,
    psnr,
    render,
    ssim,
    train_teacher,
)

__all__ = [
    "ConfigError",
    "Dataset",
    "IoError",
    "Model",
    "NumericError",
    "RunConfig",
    "ScheduleError",
    "distill",
    "evaluate",
    "full_attention",
    "layout_at",
    "linear_attention",
    "make_dataset",
    "orbit_pose",
    "psnr",
    "render",
    "ssim",
    "train_teacher",
]
