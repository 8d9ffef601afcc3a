"""Layer modules on top of the tensor engine."""
from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal container: parameters, buffers, and child modules in insertion order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_decay", {})
        object.__setattr__(self, "training", True)

    def register_param(self, name: str, value: Tensor, decay: bool = False) -> None:
        value.requires_grad = True
        self._params[name] = value
        self._decay[name] = decay
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif name in self._params:
            self._params[name] = value
        elif name in self._buffers:
            self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator["Module"]:
        return iter(self._modules.values())

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}{name}.")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for mprefix, mod in self.named_modules(prefix):
            for name, p in mod._params.items():
                yield mprefix + name, p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mprefix, mod in self.named_modules(prefix):
            for name, b in mod._buffers.items():
                yield mprefix + name, b

    def decay_mask(self) -> list[bool]:
        """Per-parameter weight-decay flags, aligned with :meth:`parameters`."""
        return [mod._decay[name] for _, mod in self.named_modules() for name in mod._params]

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, arr in state.items():
            if own[name].shape != np.shape(arr):
                raise ValueError(f"{name}: shape {np.shape(arr)} does not match {own[name].shape}")
            own[name][...] = arr

    def astype(self, dtype) -> "Module":
        """Convert parameters and buffers in place (e.g. to float64 for gradient checks)."""
        for _, mod in self.named_modules():
            for name, p in mod._params.items():
                p.data = p.data.astype(dtype)
                p.grad = None
            for name, b in list(mod._buffers.items()):
                mod.register_buffer(name, b.astype(dtype))
        return self

    @property
    def dtype(self) -> np.dtype:
        params = self.parameters()
        return params[0].dtype if params else T.get_default_dtype()


# -- layers ------------------------------------------------------------------

class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, bias: bool = True):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        dt = T.get_default_dtype()
        self.register_param("weight", Tensor(np.zeros((out_channels, in_channels, kernel_size, kernel_size), dt)), decay=True)
        self.bias = None
        if bias:
            self.register_param("bias", Tensor(np.zeros(out_channels, dt)))

    fan_in = property(lambda self: self.in_channels * self.kernel_size ** 2)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise T.ShapeError(f"conv2d: expected {self.in_channels} input channels, got shape {shape}")
        k, s, p = self.kernel_size, self.stride, self.padding
        return (self.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def descriptor(self) -> dict:
        return {"type": "conv", "in": self.in_channels, "out": self.out_channels, "k": self.kernel_size,
                "stride": self.stride, "pad": self.padding, "bias": self.bias is not None}


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, kernel_size: int = 3, stride: int = 1, padding: int = 1):
        super().__init__()
        self.channels, self.kernel_size, self.stride, self.padding = channels, kernel_size, stride, padding
        dt = T.get_default_dtype()
        self.register_param("weight", Tensor(np.zeros((channels, 1, kernel_size, kernel_size), dt)), decay=True)

    fan_in = property(lambda self: self.kernel_size ** 2)

    def forward(self, x: Tensor) -> Tensor:
        return T.depthwise_conv2d(x, self.weight, self.stride, self.padding)

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.channels:
            raise T.ShapeError(f"depthwise_conv2d: expected {self.channels} channels, got shape {shape}")
        k, s, p = self.kernel_size, self.stride, self.padding
        return (c, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def descriptor(self) -> dict:
        return {"type": "dwconv", "channels": self.channels, "k": self.kernel_size,
                "stride": self.stride, "pad": self.padding}


class ConvTranspose2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, bias: bool = True):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        dt = T.get_default_dtype()
        self.register_param("weight", Tensor(np.zeros((in_channels, out_channels, kernel_size, kernel_size), dt)), decay=True)
        self.bias = None
        if bias:
            self.register_param("bias", Tensor(np.zeros(out_channels, dt)))

    fan_in = property(lambda self: self.in_channels * self.kernel_size ** 2)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise T.ShapeError(f"conv_transpose2d: expected {self.in_channels} input channels, got shape {shape}")
        k, s, p = self.kernel_size, self.stride, self.padding
        return (self.out_channels, (h - 1) * s + k - 2 * p, (w - 1) * s + k - 2 * p)

    def descriptor(self) -> dict:
        return {"type": "convT", "in": self.in_channels, "out": self.out_channels, "k": self.kernel_size,
                "stride": self.stride, "pad": self.padding, "bias": self.bias is not None}


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        dt = T.get_default_dtype()
        self.register_param("weight", Tensor(np.ones(channels, dt)))
        self.register_param("bias", Tensor(np.zeros(channels, dt)))
        self.register_buffer("running_mean", np.zeros(channels, dt))
        self.register_buffer("running_var", np.ones(channels, dt))

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)

    def output_shape(self, shape):
        if shape[0] != self.channels:
            raise T.ShapeError(f"batchnorm2d: expected {self.channels} channels, got shape {shape}")
        return shape

    def descriptor(self) -> dict:
        return {"type": "bn", "channels": self.channels}


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.relu(x)

    def output_shape(self, shape):
        return shape

    def descriptor(self) -> dict:
        return {"type": "relu"}


class MaxPool2d(Module):
    def __init__(self, kernel_size: int = 2):
        super().__init__()
        self.kernel_size = kernel_size

    def forward(self, x: Tensor) -> Tensor:
        return T.maxpool2d(x, self.kernel_size)

    def output_shape(self, shape):
        c, h, w = shape
        k = self.kernel_size
        if h < k or w < k:
            raise T.ShapeError(f"maxpool2d: kernel {k} larger than input {shape}")
        return (c, (h - k) // k + 1, (w - k) // k + 1)

    def descriptor(self) -> dict:
        return {"type": "maxpool", "k": self.kernel_size}


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        dt = T.get_default_dtype()
        # stored (in, out) so the forward pass is a plain x @ W
        self.register_param("weight", Tensor(np.zeros((in_features, out_features), dt)), decay=True)
        self.bias = None
        if bias:
            self.register_param("bias", Tensor(np.zeros(out_features, dt)))

    fan_in = property(lambda self: self.in_features)

    def forward(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        return out if self.bias is None else out + self.bias


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    @property
    def layers(self) -> list[Module]:
        return list(self._modules.values())

    def forward(self, x: Tensor) -> Tensor:
        for layer in self._modules.values():
            x = layer(x)
        return x

    def output_shape(self, shape):
        for layer in self._modules.values():
            shape = layer.output_shape(shape)
        return tuple(shape)

    def __len__(self) -> int:
        return len(self._modules)


def layer_from_descriptor(desc: dict) -> Module:
    kind = desc["type"]
    if kind == "conv":
        return Conv2d(desc["in"], desc["out"], desc["k"], desc.get("stride", 1), desc.get("pad", 0), desc.get("bias", True))
    if kind == "convT":
        return ConvTranspose2d(desc["in"], desc["out"], desc["k"], desc.get("stride", 1), desc.get("pad", 0), desc.get("bias", True))
    if kind == "dwconv":
        return DepthwiseConv2d(desc["channels"], desc["k"], desc.get("stride", 1), desc.get("pad", 1))
    if kind == "bn":
        return BatchNorm2d(desc["channels"])
    if kind == "relu":
        return ReLU()
    if kind == "maxpool":
        return MaxPool2d(desc.get("k", 2))
    raise ValueError(f"unknown layer type {kind!r}")


def he_normal_(module: Module, rng: np.random.Generator) -> None:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases, unit/zero batchnorm affine."""
    for _, mod in module.named_modules():
        if isinstance(mod, BatchNorm2d):
            mod.weight.data[...] = 1.0
            mod.bias.data[...] = 0.0
            mod.running_mean[...] = 0.0
            mod.running_var[...] = 1.0
        elif hasattr(type(mod), "fan_in"):
            std = np.sqrt(2.0 / mod.fan_in)
            w = mod.weight
            w.data[...] = rng.normal(0.0, std, size=w.shape).astype(w.dtype)
            bias: Optional[Tensor] = getattr(mod, "bias", None)
            if bias is not None:
                bias.data[...] = 0.0
