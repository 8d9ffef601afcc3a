"""Experiment configuration: JSON schema, validation and hashing.

A config file is a single JSON object.  Unknown keys anywhere are rejected so
that a typo cannot silently fall back to a default in the middle of a sweep.
"""
from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import jsonschema

from .blocknet import ARCHITECTURES
from .distill import METHODS, DistillConfig, DistillConfigError
from .sftn import ConfigError as LossConfigError, LossConfig
from .trainer import SgdConfig

log = logging.getLogger(__name__)

TEACHER_MODES = ("standard", "sftn", "sftn-ft")
BRANCH_TERMS = ("lambda_kl", "lambda_ce", "tau_tilde", "branches")

_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_SGD = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "lr": _POS,
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "weight_decay": _NONNEG,
        "epochs": {"type": "integer", "minimum": 0},
        "milestones": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "decay_factor": _POS,
        "batch_size": {"type": "integer", "minimum": 1},
    },
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "sftnkit experiment config",
    "type": "object",
    "additionalProperties": False,
    "required": ["teacher_arch", "student_arch", "teacher_mode", "seeds"],
    "properties": {
        "teacher_arch": {"enum": sorted(ARCHITECTURES)},
        "student_arch": {"enum": sorted(ARCHITECTURES)},
        "teacher_mode": {"enum": list(TEACHER_MODES)},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "output_dir": {"type": "string"},
        "teacher_checkpoint": {"type": "string"},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": {"enum": ["synth", "idx", "sfds"]},
                "task": {"enum": ["primary", "transfer"]},
                "n": {"type": "integer", "minimum": 10},
                "seed": {"type": "integer", "minimum": 0},
                "difficulty": _NONNEG,
                "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "images_path": {"type": "string"},
                "labels_path": {"type": "string"},
                "path": {"type": "string"},
            },
        },
        "loss": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda_t": _NONNEG,
                "lambda_kl": _NONNEG,
                "lambda_ce": _NONNEG,
                "tau_tilde": _POS,
                "branches": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 1}},
            },
        },
        "distill": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "method": {"enum": list(METHODS)},
                "tau_kd": _POS,
                "lambda_kd": _NONNEG,
                "lambda_hint": {"type": ["number", "null"], "minimum": 0},
                "hint_blocks": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 1}},
            },
        },
        "teacher_sgd": _SGD,
        "student_sgd": _SGD,
        "finetune": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "pretrained_checkpoint": {"type": "string"},
                "epochs_branch_only": {"type": "integer", "minimum": 0},
                "epochs_joint": {"type": "integer", "minimum": 0},
            },
        },
    },
}


class ConfigValidationError(ValueError):
    """Raised with one ``path: message`` line per problem."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n  " + "\n  ".join(problems))


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synth"
    task: str = "primary"
    n: int = 3000
    seed: int = 0
    difficulty: float = 1.0
    test_fraction: float = 1 / 6
    images_path: Optional[str] = None
    labels_path: Optional[str] = None
    path: Optional[str] = None


@dataclass(frozen=True)
class FinetuneSpec:
    pretrained_checkpoint: Optional[str] = None
    epochs_branch_only: int = 4
    epochs_joint: int = 4


@dataclass(frozen=True)
class ExperimentConfig:
    teacher_arch: str
    student_arch: str
    teacher_mode: str
    seeds: tuple[int, ...]
    loss: LossConfig = field(default_factory=LossConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    teacher_sgd: SgdConfig = field(default_factory=SgdConfig)
    student_sgd: SgdConfig = field(default_factory=SgdConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    finetune: FinetuneSpec = field(default_factory=FinetuneSpec)
    output_dir: Optional[str] = None
    teacher_checkpoint: Optional[str] = None

    def to_dict(self) -> dict:
        d = {
            "teacher_arch": self.teacher_arch,
            "student_arch": self.student_arch,
            "teacher_mode": self.teacher_mode,
            "seeds": list(self.seeds),
            "loss": {k: v for k, v in self.loss.to_dict().items() if k not in ("tau_kd", "lambda_kd")},
            "distill": self.distill.to_dict(),
            "teacher_sgd": self.teacher_sgd.to_dict(),
            "student_sgd": self.student_sgd.to_dict(),
            "dataset": {k: v for k, v in vars(self.dataset).items() if v is not None},
            "finetune": {k: v for k, v in vars(self.finetune).items() if v is not None},
        }
        if self.output_dir is not None:
            d["output_dir"] = self.output_dir
        if self.teacher_checkpoint is not None:
            d["teacher_checkpoint"] = self.teacher_checkpoint
        return d

    def hash(self) -> str:
        """Content hash of everything that affects results (the output location does not)."""
        d = self.to_dict()
        d.pop("output_dir", None)
        return canonical_hash(d)

    def with_seeds(self, seeds) -> "ExperimentConfig":
        return replace(self, seeds=tuple(seeds))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def canonical_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def _path(error: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in error.absolute_path]
    return ".".join(parts) if parts else "<root>"


def _schema_problems(raw) -> list[str]:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: [str(p) for p in e.absolute_path])
    return [f"{_path(e)}: {e.message}" for e in errors]


def _sgd(raw: Optional[dict], where: str, problems: list[str]) -> SgdConfig:
    raw = dict(raw or {})
    try:
        if "epochs" in raw and "milestones" not in raw:
            # only the length given: keep the default schedule shape
            epochs = raw.pop("epochs")
            return SgdConfig(**raw).rescaled(epochs)
        return SgdConfig(**raw)
    except ValueError as e:
        problems.append(f"{where}: {e}")
        return SgdConfig()


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a decoded JSON object and build an :class:`ExperimentConfig`."""
    problems = _schema_problems(raw)
    if problems:
        raise ConfigValidationError(problems)
    mode = raw["teacher_mode"]
    loss_raw = dict(raw.get("loss", {}))
    if mode == "standard":
        present = [k for k in BRANCH_TERMS if k in loss_raw]
        if present:
            msg = f"teacher_mode=standard ignores branch loss terms: {', '.join('loss.' + k for k in present)}"
            warnings.warn(msg, UserWarning, stacklevel=2)
            log.warning(msg)
            for k in present:
                loss_raw.pop(k)
    distill_raw = dict(raw.get("distill", {}))
    try:
        if loss_raw.get("branches") is not None:
            loss_raw["branches"] = tuple(loss_raw["branches"])
        loss = LossConfig(**loss_raw, tau_kd=distill_raw.get("tau_kd", 4.0),
                          lambda_kd=distill_raw.get("lambda_kd", 1.0))
    except LossConfigError as e:
        problems.append(f"loss: {e}")
        loss = LossConfig()
    try:
        if distill_raw.get("hint_blocks") is not None:
            distill_raw["hint_blocks"] = tuple(distill_raw["hint_blocks"])
        dcfg = DistillConfig(**distill_raw)
    except DistillConfigError as e:
        problems.append(f"distill: {e}")
        dcfg = DistillConfig()
    teacher_sgd = _sgd(raw.get("teacher_sgd"), "teacher_sgd", problems)
    student_sgd = _sgd(raw.get("student_sgd"), "student_sgd", problems)
    ds = DatasetSpec(**raw.get("dataset", {}))
    if ds.source == "idx" and not (ds.images_path and ds.labels_path):
        problems.append("dataset: source=idx needs images_path and labels_path")
    if ds.source == "sfds" and not ds.path:
        problems.append("dataset: source=sfds needs path")
    if problems:
        raise ConfigValidationError(problems)
    return ExperimentConfig(
        teacher_arch=raw["teacher_arch"], student_arch=raw["student_arch"], teacher_mode=mode,
        seeds=tuple(raw["seeds"]), loss=loss, distill=dcfg, teacher_sgd=teacher_sgd, student_sgd=student_sgd,
        dataset=ds, finetune=FinetuneSpec(**raw.get("finetune", {})), output_dir=raw.get("output_dir"),
        teacher_checkpoint=raw.get("teacher_checkpoint"))


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigValidationError([f"<file>: not valid JSON ({e})"]) from None
    return parse_config(raw)
