"""Experiment orchestration: dataset loading, teacher training, distillation, sweeps."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

from .blocknet import BlockNet, build_architecture
from .checkpoint import checkpoint_hash, load_checkpoint
from .config import ExperimentConfig
from .data import Dataset, gen_synth_vision, load_idx, load_sfds, split_train_test
from .distill import DistillResult, distill_train
from .metrics import accuracy, similarity_report
from .report import SeedResult
from .sftn import LossConfig, build_sftn, finetune_sftn_from_pretrained, train_sftn
from .trainer import DivergenceError, EpochLog, train_supervised

log = logging.getLogger(__name__)

SWEEP_AXES = ("tau_tilde", "lambda_kl", "lambda_ce", "lambda_t", "branches")
STUDENT_SEED_OFFSET = 100  # student init stream kept apart from the teacher's


class MissingCheckpointError(FileNotFoundError):
    pass


def load_dataset(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    spec = cfg.dataset
    if spec.source == "synth":
        ds = gen_synth_vision(spec.task, spec.n, spec.seed, spec.difficulty)
    elif spec.source == "idx":
        ds = load_idx(spec.images_path, spec.labels_path)
    else:
        ds = load_sfds(spec.path)
    return split_train_test(ds, spec.test_fraction)


def _history(entries: Sequence[EpochLog]) -> list[dict]:
    return [e.to_dict() for e in entries]


@dataclass
class TeacherRun:
    teacher: BlockNet
    history: list[dict]
    info: dict
    wall_time_s: float


def _resolve(path_template: str, seed: int) -> Path:
    path = Path(path_template.format(seed=seed))
    if not path.exists():
        raise MissingCheckpointError(f"checkpoint not found: {path}")
    return path


def train_teacher(cfg: ExperimentConfig, seed: int, train: Dataset,
                  on_epoch: Optional[Callable[[EpochLog], None]] = None) -> TeacherRun:
    """Train one teacher according to ``cfg.teacher_mode``."""
    start = time.perf_counter()
    shape, k = train.images.shape[1:], train.num_classes
    teacher = build_architecture(cfg.teacher_arch, shape, k, seed=seed)
    if cfg.teacher_mode == "standard":
        hist = train_supervised(teacher, train, cfg.teacher_sgd, seed, on_epoch)
        teacher.eval()
        info = {"mode": "standard", "seed": seed, "dataset": train.id}
    elif cfg.teacher_mode == "sftn":
        student = build_architecture(cfg.student_arch, shape, k)
        model = build_sftn(teacher, student, seed, cfg.loss.branches)
        res = train_sftn(model, train, cfg.teacher_sgd, cfg.loss, seed, on_epoch)
        teacher, hist, info = res.teacher, res.history, res.info
    else:
        ft = cfg.finetune
        if ft.pretrained_checkpoint:
            pretrained = load_checkpoint(_resolve(ft.pretrained_checkpoint, seed))
        else:
            log.info("no pretrained teacher given; training a standard one first")
            train_supervised(teacher, train, cfg.teacher_sgd, seed)
            pretrained = teacher.eval()
        start = time.perf_counter()
        student = build_architecture(cfg.student_arch, shape, k)
        res = finetune_sftn_from_pretrained(pretrained, student, train, cfg.teacher_sgd, cfg.loss, seed,
                                            ft.epochs_branch_only, ft.epochs_joint, on_epoch)
        teacher, hist, info = res.teacher, res.history, res.info
        info["pretrained_hash"] = checkpoint_hash(pretrained)
    return TeacherRun(teacher, _history(hist), info, time.perf_counter() - start)


def obtain_teacher(cfg: ExperimentConfig, seed: int, default_path: Optional[Path]) -> BlockNet:
    """Load the teacher for a distillation run; never trains one implicitly."""
    if cfg.teacher_checkpoint:
        path = _resolve(cfg.teacher_checkpoint, seed)
    elif default_path is not None and default_path.exists():
        path = default_path
    else:
        raise MissingCheckpointError(f"no teacher checkpoint for seed {seed} (looked for {default_path}); "
                                     "run train-teacher first or set teacher_checkpoint")
    return load_checkpoint(path, expect=build_architecture(cfg.teacher_arch).descriptor())


def distill_student(cfg: ExperimentConfig, teacher: BlockNet, seed: int, train: Dataset,
                    on_epoch: Optional[Callable[[EpochLog], None]] = None) -> DistillResult:
    student = build_architecture(cfg.student_arch, train.images.shape[1:], train.num_classes,
                                 seed=seed + STUDENT_SEED_OFFSET)
    return distill_train(student, teacher, train, cfg.distill, cfg.student_sgd, seed, on_epoch)


def evaluate_pair(teacher: BlockNet, student: Optional[BlockNet], test: Dataset) -> dict:
    out = {"teacher_acc": accuracy(teacher, test)}
    if student is not None:
        out["student_acc"] = accuracy(student, test)
        out["similarity"] = similarity_report(teacher, student, test).to_dict()
    return out


def full_run(cfg: ExperimentConfig, seed: int, train: Dataset, test: Dataset) -> SeedResult:
    """Teacher training followed by distillation, evaluated on the test split."""
    start = time.perf_counter()
    trun = train_teacher(cfg, seed, train)
    dres = distill_student(cfg, trun.teacher, seed, train)
    ev = evaluate_pair(trun.teacher, dres.student, test)
    return SeedResult(seed=seed, teacher_acc=ev["teacher_acc"], teacher_hash=checkpoint_hash(trun.teacher),
                      teacher_history=trun.history, student_acc=ev["student_acc"],
                      student_hash=checkpoint_hash(dres.student), student_history=_history(dres.history),
                      similarity=ev["similarity"], wall_time_s=time.perf_counter() - start)


def sweep_config(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis not in SWEEP_AXES:
        raise ValueError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    if axis == "branches":
        value = tuple(int(v) for v in value)
    loss = replace(cfg.loss, **{axis: value})
    LossConfig(**{**loss.to_dict(), "branches": loss.branches})  # re-run validation
    mode = cfg.teacher_mode if cfg.teacher_mode != "standard" else "sftn"
    return replace(cfg, loss=loss, teacher_mode=mode)


def run_sweep(cfg: ExperimentConfig, axis: str, values: Sequence, train: Dataset,
              test: Dataset) -> Iterator[dict]:
    """One teacher + distillation per (value, seed); yields rows as they finish.

    A diverged run yields an ``aborted`` row instead of stopping the sweep.
    """
    if not values:
        raise ValueError("sweep needs at least one value")
    for value in values:
        point = sweep_config(cfg, axis, value)
        shown = "+".join(str(v) for v in value) if axis == "branches" else value
        for seed in cfg.seeds:
            try:
                res = full_run(point, seed, train, test)
                yield {"axis": axis, "value": shown, "seed": seed, "teacher_acc": res.teacher_acc,
                       "student_acc": res.student_acc, "status": "ok"}
            except DivergenceError as e:
                log.error("sweep point %s=%s seed %d aborted: %s", axis, shown, seed, e)
                yield {"axis": axis, "value": shown, "seed": seed, "status": "aborted"}
