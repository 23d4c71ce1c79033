"""Small deterministic numpy engine for the attention and policy networks."""

from gazerace.nn.core import Module, Param, Sequential, get_dtype, precision, set_dtype
from gazerace.nn.gradcheck import check_module, numeric_grad, relative_error
from gazerace.nn.layers import (
    BatchNorm2d,
    Conv1d,
    Conv2d,
    Crop2d,
    Flatten,
    Linear,
    MaxAxis,
    MaxPool2d,
    MeanAxis,
    ReLU,
    ResidualBlock,
    SpatialLogSoftmax,
    SpatialSoftmax,
    Upsample,
    log_softmax_flat,
)
from gazerace.nn.optim import Adam, adam_step
from gazerace.nn.serialize import WeightFileError, load_file, load_params, read_entries, read_tag, save_file, save_params

__all__ = [
    "Adam", "BatchNorm2d", "Conv1d", "Conv2d", "Crop2d", "Flatten", "Linear", "MaxAxis", "MaxPool2d",
    "MeanAxis", "Module", "Param", "ReLU", "ResidualBlock", "Sequential", "SpatialLogSoftmax",
    "SpatialSoftmax", "Upsample", "WeightFileError", "adam_step", "check_module", "get_dtype",
    "load_file", "load_params", "log_softmax_flat", "numeric_grad", "precision", "read_entries", "read_tag",
    "relative_error", "save_file", "save_params", "set_dtype",
]
