import logging
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from modules.errors import TensorError
from modules.tensor import Conv1d as _Conv1d
from modules.tensor import GlobalAvgPool1d as _GlobalAvgPool1d
from modules.tensor import MaxPool1d as _MaxPool1d
from modules.tensor import Tensor

logger = logging.getLogger("kavi.nn")


class Parameter(Tensor):

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


def kaiming_uniform(shape: tuple, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class LayerCost:
    params: int
    flops: int
    out_shape: tuple


class Module:
    '''Parameter container. Parameters, buffers and submodules are discovered from
    instance attributes in assignment order, which fixes checkpoint naming.'''

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith('_'):
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = '') -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            else:
                yield from value.named_parameters(prefix + name + '.')

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = '') -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + name + '.')

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: buf for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        expected = set(self.state_dict())
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise TensorError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in self.named_parameters():
            if state[name].shape != p.shape:
                raise TensorError(f"{name}: expected shape {p.shape}, got {state[name].shape}")
            p.data = Tensor(state[name]).data
        for m_prefix, m in self._named_modules():
            for name in m._buffers:
                m._buffers[name] = np.array(state[m_prefix + name], dtype=np.float64)

    def _named_modules(self, prefix: str = '') -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value._named_modules(prefix + name + '.')

    def cost(self, in_shape: tuple) -> LayerCost:
        raise NotImplementedError


class Linear(Module):

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(kaiming_uniform((in_features, out_features), in_features, rng))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def cost(self, in_shape):
        n_in, n_out = self.weight.shape
        return LayerCost(self.weight.size + self.bias.size, 2 * n_in * n_out + n_out, (n_out,))


class Conv1d(Module):

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int, rng: np.random.Generator, padding: int | None = None):
        super().__init__()
        fan_in = in_channels * kernel_size
        self.weight = Parameter(kaiming_uniform((out_channels, in_channels, kernel_size), fan_in, rng))
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = (kernel_size - 1) // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        out = _Conv1d.apply(x, self.weight, stride=self.stride, padding=self.padding)
        return out + self.bias.reshape(1, -1, 1)

    def out_length(self, length: int) -> int:
        k = self.weight.shape[2]
        return (length + 2 * self.padding - k) // self.stride + 1

    def cost(self, in_shape):
        c_out, c_in, k = self.weight.shape
        l_out = self.out_length(in_shape[-1])
        flops = 2 * k * c_in * c_out * l_out + c_out * l_out
        return LayerCost(self.weight.size + self.bias.size, flops, (c_out, l_out))


class BatchNorm(Module):
    '''Normalizes over every axis but the channel axis (1). Running statistics are
    updated only while training.'''

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.weight = Parameter(np.ones(num_features))
        self.bias = Parameter(np.zeros(num_features))
        self.momentum = momentum
        self.eps = eps
        self._buffers['running_mean'] = np.zeros(num_features)
        self._buffers['running_var'] = np.ones(num_features)

    def forward(self, x: Tensor) -> Tensor:
        axes = (0,) if x.ndim == 2 else (0, 2)
        shape = (1, -1) if x.ndim == 2 else (1, -1, 1)
        if self.training:
            mean = x.mean(axis=axes, keepdims=True)
            centered = x - mean
            var = (centered * centered).mean(axis=axes, keepdims=True)
            n = x.size // x.shape[1]
            m = self.momentum
            self._buffers['running_mean'] = (1 - m) * self._buffers['running_mean'] + m * mean.data.reshape(-1)
            unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
            self._buffers['running_var'] = (1 - m) * self._buffers['running_var'] + m * unbiased
            normalized = centered / (var + self.eps).sqrt()
        else:
            mean = self._buffers['running_mean'].reshape(shape)
            std = np.sqrt(self._buffers['running_var'] + self.eps).reshape(shape)
            normalized = (x - mean) / std
        return normalized * self.weight.reshape(*shape) + self.bias.reshape(*shape)

    def cost(self, in_shape):
        return LayerCost(self.weight.size + self.bias.size, int(np.prod(in_shape)), in_shape)


class ReLU(Module):

    def forward(self, x: Tensor) -> Tensor:
        return x.relu()

    def cost(self, in_shape):
        return LayerCost(0, int(np.prod(in_shape)), in_shape)


class MaxPool1d(Module):

    def __init__(self, kernel_size: int = 2, stride: int = 2):
        super().__init__()
        self.kernel_size = kernel_size
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return _MaxPool1d.apply(x, kernel=self.kernel_size, stride=self.stride)

    def cost(self, in_shape):
        channels, length = in_shape
        l_out = (length - self.kernel_size) // self.stride + 1
        return LayerCost(0, channels * length, (channels, l_out))


class GlobalAvgPool1d(Module):

    def forward(self, x: Tensor) -> Tensor:
        return _GlobalAvgPool1d.apply(x)

    def cost(self, in_shape):
        channels, length = in_shape
        return LayerCost(0, channels * length, (channels,))


class SGD:
    '''Plain stochastic gradient descent; touches nothing but the registered parameters.'''

    def __init__(self, params: list[Parameter], lr: float):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is None:
                continue
            p.data = Tensor(p.data - self.lr * p.grad).data

    def zero_grad(self):
        for p in self.params:
            p.grad = None
