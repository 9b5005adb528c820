"""Low-light image enhancement with spatially-adaptive integral illumination."""

from ._core import (
    ConfigError,
    Error,
    FormatError,
    IoError,
    Model,
    ShapeError,
    box_sum,
    cosine_lr,
    default_config,
    gradcheck,
    param_count,
    psnr,
    ssim,
    toy_config,
)

__all__ = [
    "ConfigError",
    "Error",
    "FormatError",
    "IoError",
    "Model",
    "ShapeError",
    "box_sum",
    "cosine_lr",
    "default_config",
    "gradcheck",
    "param_count",
    "psnr",
    "ssim",
    "toy_config",
]
