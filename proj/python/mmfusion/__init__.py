"""Multimodal 2D/3D fusion networks: shape calculus, metrics, synthetic data and models."""

from ._mmfusion import (
    ConfigError,
    ConversionParams,
    InputError,
    Model,
    NumericError,
    UsageError,
    auc,
    cohen_kappa,
    config_digest,
    conversion_params,
    render_config,
    sens_spec,
    shape_check,
    synth,
    train,
    youden_threshold,
)

__all__ = [
    "ConfigError",
    "ConversionParams",
    "InputError",
    "Model",
    "NumericError",
    "UsageError",
    "auc",
    "cohen_kappa",
    "config_digest",
    "conversion_params",
    "render_config",
    "sens_spec",
    "shape_check",
    "synth",
    "train",
    "youden_threshold",
]
