"""Minimal reverse-mode autodiff core with the operator set the metric network needs."""

from .core import Tensor, add, as_tensor, concat, mean, mul, relu, reshape, square, sub, take_rows, tsum
from .nn import conv2d, dropout, elu, euclidean_distance, fully_connected, maxpool2d, parameter
from .optim import AdamState, LrSchedule, SGDState, adam_step, lr_at, sgd_momentum_step

__all__ = [
    "Tensor", "add", "as_tensor", "concat", "mean", "mul", "relu", "reshape", "square", "sub",
    "take_rows", "tsum", "conv2d", "dropout", "elu", "euclidean_distance", "fully_connected", "maxpool2d",
    "parameter", "AdamState", "LrSchedule", "SGDState", "adam_step", "lr_at", "sgd_momentum_step",
]
