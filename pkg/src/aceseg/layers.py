"""Minimal module system: parameter registration, train/eval mode, state dicts."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import IncompatibleModelError
from .ops import BNState, ConvParams
from .tensor import Tensor


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int,
               dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base class tracking parameters, buffers, and child modules by name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # -- traversal ---------------------------------------------------------

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._modules.items():
            child_prefix = f"{prefix}.{name}" if prefix else name
            yield from child.named_modules(child_prefix)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for prefix, module in self.named_modules():
            for name, p in module._params.items():
                yield (f"{prefix}.{name}" if prefix else name), p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for prefix, module in self.named_modules():
            for name in module._buffers:
                # read through the attribute so in-place buffer swaps are seen
                yield (f"{prefix}.{name}" if prefix else name), getattr(module, name)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    # -- modes and dtype -----------------------------------------------------

    def train(self) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", True)
        return self

    def eval(self) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", False)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def cast_(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.cast_(dtype)
        for _, m in self.named_modules():
            for name, buf in m._buffers.items():
                cast = buf.astype(dtype)
                m._buffers[name] = cast
                object.__setattr__(m, name, cast)
        return self

    # -- persistence ---------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            out[name] = buf
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        unknown = sorted(set(state) - set(own))
        missing = sorted(set(own) - set(state))
        if unknown or missing:
            raise IncompatibleModelError(
                f"state mismatch: unknown={unknown[:5]} missing={missing[:5]}")
        params = dict(self.named_parameters())
        buffers = {}
        for prefix, module in self.named_modules():
            for name in module._buffers:
                full = f"{prefix}.{name}" if prefix else name
                buffers[full] = (module, name)
        for name, value in state.items():
            if name in params:
                p = params[name]
                if p.data.shape != value.shape:
                    raise IncompatibleModelError(
                        f"shape mismatch for '{name}': {p.data.shape} vs {value.shape}")
                p.data = value.astype(p.data.dtype, copy=True)
            else:
                module, local = buffers[name]
                buf = getattr(module, local)
                if buf.shape != value.shape:
                    raise IncompatibleModelError(
                        f"shape mismatch for '{name}': {buf.shape} vs {value.shape}")
                buf[:] = value


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._list: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._modules[str(len(self._list))] = module
        self._list.append(module)

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


class Sequential(Module):
    def __init__(self, *modules: Module):
        super().__init__()
        self._list = []
        for i, m in enumerate(modules):
            self._modules[str(i)] = m
            self._list.append(m)

    def forward(self, x: Tensor) -> Tensor:
        for m in self._list:
            x = m(x)
        return x


class Conv2d(Module):
    """Standard convolution layer; He-uniform fan-in init, zero bias."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 dilation: int = 1, bias: bool = True):
        super().__init__()
        self.params = ConvParams(kernel_size, kernel_size, stride, padding, dilation)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Tensor(
            he_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in),
            requires_grad=True)
        self.bias: Optional[Tensor] = None
        if bias:
            self.bias = Tensor(np.zeros((1, out_channels, 1, 1), dtype=np.float32),
                               requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.params)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1):
        super().__init__()
        self.gamma = Tensor(np.ones((1, channels, 1, 1), dtype=np.float32),
                            requires_grad=True)
        self.beta = Tensor(np.zeros((1, channels, 1, 1), dtype=np.float32),
                           requires_grad=True)
        self.momentum = momentum
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        state = BNState(self._buffers["running_mean"], self._buffers["running_var"],
                        self.momentum)
        return ops.batch_norm(x, self.gamma, self.beta, state, training=self.training)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(x)


class ConvBNReLU(Module):
    """Conv (no bias) -> BatchNorm -> ReLU, the standard block."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 dilation: int = 1):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel_size, rng,
                           stride=stride, padding=padding, dilation=dilation, bias=False)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))
