"""LiDAR occupancy flow: simulator, recurrent flow network, training and evaluation."""

from ._core import (
    CompatibilityError,
    Dataset,
    DimensionError,
    Error,
    IoError,
    Model,
    NumericError,
    ParameterError,
    bilinear_warp,
    evaluate,
    f1_score,
    filter_size,
    gaussian_filter,
    init_model,
    learning_rate,
    load_checkpoint,
    load_dataset,
    predict,
    simulate,
    train,
)

__all__ = [
    "CompatibilityError",
    "Dataset",
    "DimensionError",
    "Error",
    "IoError",
    "Model",
    "NumericError",
    "ParameterError",
    "bilinear_warp",
    "evaluate",
    "f1_score",
    "filter_size",
    "gaussian_filter",
    "init_model",
    "learning_rate",
    "load_checkpoint",
    "load_dataset",
    "predict",
    "simulate",
    "train",
]
