"""Layer modules: parameters + the op that consumes them."""

from __future__ import annotations

import numpy as np

from . import ops
from .module import Module, Parameter, init_uniform
from .tensor import Tensor


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, *, stride: int = 1, dilation: int = 1,
                 groups: int = 1, padding: str = "none", bias: bool = True,
                 dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.dilation = dilation
        self.groups = groups
        self.padding = padding
        fan_in = (in_channels // groups) * kernel
        fan_out = (out_channels // groups) * kernel
        self.weight = Parameter(
            init_uniform(rng, (out_channels, in_channels // groups, kernel),
                         fan_in, fan_out, dtype),
            init_spec=f"uniform_fan({fan_in},{fan_out})")
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype), "zeros") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.weight.tensor,
                          self.bias.tensor if self.bias is not None else None,
                          stride=self.stride, dilation=self.dilation,
                          groups=self.groups, padding=self.padding)


class ConvTranspose1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, *, stride: int = 1, bias: bool = True,
                 dtype=np.float32):
        super().__init__()
        self.stride = stride
        fan_in = in_channels * kernel
        fan_out = out_channels * kernel
        self.weight = Parameter(
            init_uniform(rng, (in_channels, out_channels, kernel), fan_in, fan_out, dtype),
            init_spec=f"uniform_fan({fan_in},{fan_out})")
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype), "zeros") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose1d(x, self.weight.tensor,
                                    self.bias.tensor if self.bias is not None else None,
                                    stride=self.stride)


class BatchNorm1d(Module):
    def __init__(self, channels: int, *, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype), "ones")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), "zeros")
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return ops.batch_norm(x, self.gamma.tensor, self.beta.tensor,
                              self.running_mean, self.running_var,
                              training=training, momentum=self.momentum, eps=self.eps)


class BiLSTM(Module):
    """One bidirectional layer; hidden units are per direction."""

    def __init__(self, in_features: int, hidden: int, rng: np.random.Generator,
                 *, dtype=np.float32):
        super().__init__()
        self.hidden = hidden
        for tag in ("fw", "bw"):
            wx = init_uniform(rng, (in_features, 4 * hidden), in_features, 4 * hidden, dtype)
            wh = init_uniform(rng, (hidden, 4 * hidden), hidden, 4 * hidden, dtype)
            b = np.zeros(4 * hidden, dtype=dtype)
            b[hidden:2 * hidden] = 1.0  # forget gate
            setattr(self, f"wx_{tag}", Parameter(wx, "uniform_fan"))
            setattr(self, f"wh_{tag}", Parameter(wh, "uniform_fan"))
            setattr(self, f"b_{tag}", Parameter(b, "zeros+forget1"))

    def forward(self, x: Tensor) -> Tensor:
        params = ((self.wx_fw.tensor, self.wh_fw.tensor, self.b_fw.tensor),
                  (self.wx_bw.tensor, self.wh_bw.tensor, self.b_bw.tensor))
        return ops.bilstm(x, params, self.hidden)
