from .tensor import Tensor, NumericFault, as_tensor, make_node
from .module import Module, ModuleList, Parameter, param_count, init_uniform
from .ops import (add, mul, scale, concat, dense, conv1d, conv_transpose1d,
                  batch_norm, leaky_relu, sigmoid, tanh, bilstm,
                  downsample_decimate, upsample_linear, swap_time_channels)
from .layers import Conv1d, ConvTranspose1d, BatchNorm1d, BiLSTM
from .check import GradCheckReport, grad_check

__all__ = [
    "Tensor", "NumericFault", "as_tensor", "make_node",
    "Module", "ModuleList", "Parameter", "param_count", "init_uniform",
    "add", "mul", "scale", "concat", "dense", "conv1d", "conv_transpose1d",
    "batch_norm", "leaky_relu", "sigmoid", "tanh", "bilstm",
    "downsample_decimate", "upsample_linear", "swap_time_channels",
    "Conv1d", "ConvTranspose1d", "BatchNorm1d", "BiLSTM",
    "GradCheckReport", "grad_check",
]
