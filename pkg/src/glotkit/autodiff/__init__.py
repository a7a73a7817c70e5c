from .tensor import (
    Tensor, add, sub, mul, div, neg, pow_const, matmul, exp, log, sqrt,
    tanh, sigmoid, relu, leaky_relu, abs_, square, sum_, mean, reshape,
    concat, pad, stop_gradient,
)
from .nn_ops import conv1d, pool_avg, batch_norm, BatchNormState, gated_unit, stft_logmag
from .optim import Adam, PlateauSchedule, save_checkpoint, load_checkpoint

__all__ = [
    "Tensor", "add", "sub", "mul", "div", "neg", "pow_const", "matmul",
    "exp", "log", "sqrt", "tanh", "sigmoid", "relu", "leaky_relu",
    "abs_", "square", "sum_", "mean", "reshape", "concat", "pad",
    "stop_gradient", "conv1d", "pool_avg", "batch_norm", "BatchNormState",
    "gated_unit", "stft_logmag", "Adam", "PlateauSchedule",
    "save_checkpoint", "load_checkpoint",
]
