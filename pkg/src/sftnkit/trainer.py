"""SGD with momentum, a step learning-rate schedule, and the shared epoch loop."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Dataset, batches
from .losses import cross_entropy
from .nn import Module
from .tensor import Tensor

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.value = epoch, batch, value


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    milestones: tuple[int, ...] = (19, 23, 27)
    decay_factor: float = 0.1
    batch_size: int = 64

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be nonnegative, got {self.epochs}")
        if not self.decay_factor > 0:
            raise ValueError(f"decay_factor must be positive, got {self.decay_factor}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        if ms and self.epochs and ms[-1] >= self.epochs:
            raise ValueError(f"milestones must be < epochs ({self.epochs}), got {ms}")

    def rescaled(self, epochs: int) -> "SgdConfig":
        """Same schedule shape compressed or stretched to ``epochs``."""
        if self.epochs == 0 or epochs == 0:
            return replace(self, epochs=epochs, milestones=())
        ms = sorted({int(round(m * epochs / self.epochs)) for m in self.milestones})
        ms = tuple(m for m in ms if 0 < m < epochs)
        return replace(self, epochs=epochs, milestones=ms)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


def lr_at(epoch: int, cfg: SgdConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    passed = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.lr * cfg.decay_factor ** passed


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]],
             state: Sequence[np.ndarray], cfg: SgdConfig, lr: Optional[float] = None,
             decay: Optional[Sequence[bool]] = None) -> None:
    """In-place update: v <- m*v + (g + wd*theta); theta <- theta - lr*v.

    Parameters whose gradient is ``None`` are left untouched.
    """
    lr = cfg.lr if lr is None else lr
    if not len(params) == len(grads) == len(state):
        raise ValueError(f"sgd_step: got {len(params)} params, {len(grads)} grads, {len(state)} state buffers")
    for k, (p, g, v) in enumerate(zip(params, grads, state)):
        if g is None:
            continue
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"sgd_step: shape mismatch {p.shape} / {g.shape} / {v.shape} at parameter {k}")
        if cfg.weight_decay and (decay is None or decay[k]):
            g = g + cfg.weight_decay * p
        v *= cfg.momentum
        v += g
        p -= lr * v


class SGD:
    def __init__(self, params: Sequence[Tensor], cfg: SgdConfig, decay: Optional[Sequence[bool]] = None):
        self.params = list(params)
        self.cfg = cfg
        self.decay = list(decay) if decay is not None else [True] * len(self.params)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    @classmethod
    def for_module(cls, module: Module, cfg: SgdConfig) -> "SGD":
        return cls(module.parameters(), cfg, module.decay_mask())

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        sgd_step([p.data for p in self.params], [p.grad for p in self.params],
                 self.velocity, self.cfg, lr, self.decay)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    metrics: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "lr": self.lr, **self.metrics}


StepFn = Callable[[Tensor, np.ndarray], tuple[Tensor, dict[str, float]]]


def run_epochs(step_fn: StepFn, optimizer: SGD, dataset: Dataset, cfg: SgdConfig, seed: int,
               on_epoch: Optional[Callable[[EpochLog], None]] = None,
               lr_schedule: Optional[Callable[[int], float]] = None) -> list[EpochLog]:
    """Drive ``cfg.epochs`` passes over ``dataset``.

    ``step_fn(x, y)`` builds the loss for one minibatch and returns it together
    with scalar components to average into the epoch log.
    """
    history = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch) if lr_schedule else lr_at(epoch, cfg)
        sums: dict[str, float] = {}
        seen = 0
        for bi, (xb, yb) in enumerate(batches(dataset, cfg.batch_size, seed, epoch)):
            optimizer.zero_grad()
            loss, parts = step_fn(xb, yb)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, bi, value)
            loss.backward()
            optimizer.step(lr)
            n = len(yb)
            seen += n
            for key, v in {"loss": value, **parts}.items():
                sums[key] = sums.get(key, 0.0) + v * n
        entry = EpochLog(epoch, lr, {k: v / max(seen, 1) for k, v in sums.items()})
        log.debug("epoch %d lr %.2e %s", epoch, lr, entry.metrics)
        if on_epoch:
            on_epoch(entry)
        history.append(entry)
    return history


def train_supervised(net: Module, dataset: Dataset, cfg: SgdConfig, seed: int,
                     on_epoch: Optional[Callable[[EpochLog], None]] = None) -> list[EpochLog]:
    """Plain cross-entropy training (standard teacher, or a student without KD)."""
    net.train()
    opt = SGD.for_module(net, cfg)

    def step(xb, yb):
        loss = cross_entropy(net(xb), yb)
        return loss, {"ce": loss.item()}

    return run_epochs(step, opt, dataset, cfg, seed, on_epoch)
