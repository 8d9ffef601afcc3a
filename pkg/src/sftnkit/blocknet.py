"""Block-modular CNNs with per-block feature taps.

A :class:`BlockNet` is a chain of N convolutional blocks followed by a
global-average-pool + linear head.  Block boundaries sit at pooling layers, so
every block changes the feature-map resolution.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .nn import Linear, Module, Sequential, he_normal_, layer_from_descriptor
from .tensor import Tensor

Shape = tuple[int, int, int]


class ArchitectureError(ValueError):
    """A network description is internally inconsistent."""


@dataclass
class BlockSpec:
    layers: list[dict]
    input_shape: Shape
    output_shape: Shape = field(default=None)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        inferred = Sequential(*map(layer_from_descriptor, self.layers)).output_shape(self.input_shape)
        if self.output_shape is None:
            self.output_shape = inferred
        elif tuple(self.output_shape) != inferred:
            raise ArchitectureError(f"declared output {tuple(self.output_shape)} but layers produce {inferred}")
        self.output_shape = tuple(self.output_shape)

    def build(self) -> Sequential:
        return Sequential(*map(layer_from_descriptor, self.layers))


@dataclass
class TapOutput:
    logits: Tensor
    features: list[Tensor]


class BlockNet(Module):
    def __init__(self, specs: Sequence[BlockSpec], num_classes: int, name: str = "custom"):
        super().__init__()
        if len(specs) < 2:
            raise ArchitectureError(f"a BlockNet needs at least 2 blocks, got {len(specs)}")
        for a, b in zip(specs, specs[1:]):
            if a.output_shape != b.input_shape:
                raise ArchitectureError(f"block output {a.output_shape} does not chain into input {b.input_shape}")
        self.name = name
        self.specs = list(specs)
        self.num_classes = num_classes
        self.blocks = Sequential(*(s.build() for s in specs))
        self.head = Linear(specs[-1].output_shape[0], num_classes)

    @property
    def n_blocks(self) -> int:
        return len(self.specs)

    @property
    def input_shape(self) -> Shape:
        return self.specs[0].input_shape

    def block(self, i: int) -> Sequential:
        return self.blocks.layers[i]

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise T.ShapeError(f"{self.name}: batch shape {x.shape} does not match input {self.input_shape}")

    def head_logits(self, feat: Tensor) -> Tensor:
        return self.head(T.global_avgpool(feat))

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        for blk in self.blocks.layers:
            x = blk(x)
        return self.head_logits(x)

    def forward_with_taps(self, x: Tensor) -> TapOutput:
        self._check_input(x)
        feats = []
        for blk in self.blocks.layers:
            x = blk(x)
            feats.append(x)
        return TapOutput(self.head_logits(x), feats)

    def forward_from(self, start: int, x: Tensor) -> Tensor:
        """Run blocks ``start..N-1`` and the head on an intermediate feature map."""
        for blk in self.blocks.layers[start:]:
            x = blk(x)
        return self.head_logits(x)

    def pooled_features(self, x: Tensor) -> Tensor:
        """Globally average-pooled output of the last block."""
        self._check_input(x)
        for blk in self.blocks.layers:
            x = blk(x)
        return T.global_avgpool(x)

    def descriptor(self) -> dict:
        return {
            "name": self.name,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "blocks": [s.layers for s in self.specs],
        }

    @classmethod
    def from_descriptor(cls, desc: dict) -> "BlockNet":
        shape = tuple(desc["input_shape"])
        specs = []
        for layers in desc["blocks"]:
            spec = BlockSpec(layers, shape)
            specs.append(spec)
            shape = spec.output_shape
        return cls(specs, desc["num_classes"], desc.get("name", "custom"))

    def clone(self) -> "BlockNet":
        return copy.deepcopy(self)


def init_params(net: Module, seed: int) -> Module:
    """Deterministic He-normal initialisation from a single integer seed."""
    he_normal_(net, np.random.default_rng(seed))
    return net


# -- reference architectures ---------------------------------------------------

def _plain_block(cin: int, cout: int, convs: int = 2) -> list[dict]:
    layers = []
    for i in range(convs):
        layers += [
            {"type": "conv", "in": cin if i == 0 else cout, "out": cout, "k": 3, "stride": 1, "pad": 1, "bias": False},
            {"type": "bn", "channels": cout},
            {"type": "relu"},
        ]
    return layers + [{"type": "maxpool", "k": 2}]


def _separable_block(cin: int, cout: int, convs: int = 2) -> list[dict]:
    layers = []
    for i in range(convs):
        c = cin if i == 0 else cout
        layers += [
            {"type": "dwconv", "channels": c, "k": 3, "stride": 1, "pad": 1},
            {"type": "bn", "channels": c},
            {"type": "relu"},
            {"type": "conv", "in": c, "out": cout, "k": 1, "stride": 1, "pad": 0, "bias": False},
            {"type": "bn", "channels": cout},
            {"type": "relu"},
        ]
    return layers + [{"type": "maxpool", "k": 2}]


def plain_net(channels: Sequence[int], input_shape: Shape = (3, 16, 16), num_classes: int = 10,
              convs_per_block: int = 2, name: str = "plain") -> BlockNet:
    shape, specs = tuple(input_shape), []
    for c in channels:
        spec = BlockSpec(_plain_block(shape[0], c, convs_per_block), shape)
        specs.append(spec)
        shape = spec.output_shape
    return BlockNet(specs, num_classes, name)


def separable_net(channels: Sequence[int], input_shape: Shape = (3, 16, 16), num_classes: int = 10,
                  convs_per_block: int = 2, name: str = "separable") -> BlockNet:
    shape, specs = tuple(input_shape), []
    for c in channels:
        spec = BlockSpec(_separable_block(shape[0], c, convs_per_block), shape)
        specs.append(spec)
        shape = spec.output_shape
    return BlockNet(specs, num_classes, name)


ARCHITECTURES = {
    "teacher-S3": lambda **kw: plain_net((32, 64, 128), name="teacher-S3", **kw),
    "student-S3": lambda **kw: plain_net((8, 16, 32), name="student-S3", **kw),
    "student-H3": lambda **kw: separable_net((8, 16, 32), name="student-H3", **kw),
}


def build_architecture(arch_id: str, input_shape: Shape = (3, 16, 16), num_classes: int = 10,
                       seed: Optional[int] = None) -> BlockNet:
    try:
        factory = ARCHITECTURES[arch_id]
    except KeyError:
        raise ArchitectureError(f"unknown architecture {arch_id!r}; known: {sorted(ARCHITECTURES)}") from None
    net = factory(input_shape=tuple(input_shape), num_classes=num_classes)
    if seed is not None:
        init_params(net, seed)
    return net
