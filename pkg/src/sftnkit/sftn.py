"""Student-aware teacher training.

A teacher :class:`~sftnkit.blocknet.BlockNet` is augmented with student
branches: after teacher block ``i`` (``i < N``) a transform layer reshapes the
feature map to the input of student block ``i+1``, and copies of the student's
trailing blocks produce branch logits.  The teacher is trained on

    lambda_T * CE(q_T, y)
    + lambda_KL * mean_i KL(q~_R^i || q~_T)
    + lambda_CE * mean_i CE(q_R^i, y)

where ``~`` marks softmax outputs at temperature ``tau_tilde`` and the
cross-entropy terms use temperature 1.  Only the teacher trunk is kept.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .blocknet import ArchitectureError, BlockNet, init_params
from .checkpoint import checkpoint_hash
from .data import Dataset
from .losses import kl_div, log_softmax_tempered, nll
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Linear, Module, ReLU, Sequential, he_normal_
from .tensor import Tensor
from .trainer import SGD, EpochLog, SgdConfig, run_epochs

log = logging.getLogger(__name__)

DOWNSAMPLE, UPSAMPLE, PROJECT = "downsample-conv3x3-stride2", "upsample-convT4x4-stride2", "project-conv1x1"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lambda_t: float = 1.0
    lambda_kl: float = 3.0
    lambda_ce: float = 1.0
    tau_tilde: float = 1.0
    tau_kd: float = 4.0
    lambda_kd: float = 1.0
    branches: Optional[tuple[int, ...]] = None  # 1-based active branches; None = all N-1

    def __post_init__(self):
        for name in ("lambda_t", "lambda_kl", "lambda_ce", "lambda_kd"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        for name in ("tau_tilde", "tau_kd"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.branches is not None:
            b = tuple(sorted(set(int(i) for i in self.branches)))
            if not b:
                raise ConfigError("branch mask must name at least one branch")
            object.__setattr__(self, "branches", b)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branches"] = None if self.branches is None else list(self.branches)
        return d


# -- transform layers ---------------------------------------------------------------

class TransformLayer(Module):
    """Conv adapter (followed by batchnorm + relu) from a teacher feature map to a student block input."""

    def __init__(self, kind: str, in_shape, out_shape):
        super().__init__()
        self.kind, self.in_shape, self.out_shape = kind, tuple(in_shape), tuple(out_shape)
        cin, cout = self.in_shape[0], self.out_shape[0]
        if kind == DOWNSAMPLE:
            conv = Conv2d(cin, cout, 3, stride=2, padding=1, bias=False)
        elif kind == UPSAMPLE:
            conv = ConvTranspose2d(cin, cout, 4, stride=2, padding=1, bias=False)
        elif kind == PROJECT:
            conv = Conv2d(cin, cout, 1, bias=False)
        else:
            raise ConfigError(f"unknown transform kind {kind!r}")
        self.layers = Sequential(conv, BatchNorm2d(cout), ReLU())
        actual = self.layers.output_shape(self.in_shape)
        if actual != self.out_shape:
            raise ConfigError(f"{kind} maps {self.in_shape} to {actual}, not {self.out_shape}")

    def forward(self, x: Tensor) -> Tensor:
        return self.layers(x)


def make_transform(teacher_shape, student_shape) -> TransformLayer:
    """Choose the adapter from the spatial ratio between the two feature maps."""
    (_, h, w), (_, h2, w2) = teacher_shape, student_shape
    if (h2, w2) == (h, w):
        kind = PROJECT
    elif 2 * h2 == h and 2 * w2 == w:
        kind = DOWNSAMPLE
    elif h2 == 2 * h and w2 == 2 * w:
        kind = UPSAMPLE
    else:
        raise ConfigError(f"unsupported spatial ratio from {tuple(teacher_shape)} to {tuple(student_shape)}")
    return TransformLayer(kind, teacher_shape, student_shape)


# -- model -----------------------------------------------------------------------------

class StudentBranch(Module):
    """Student blocks ``start..N-1`` plus a pooled linear head."""

    def __init__(self, student: BlockNet, start: int):
        super().__init__()
        self.start = start
        self.blocks = Sequential(*(copy.deepcopy(student.block(j)) for j in range(start, student.n_blocks)))
        self.head = Linear(student.specs[-1].output_shape[0], student.num_classes)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(T.global_avgpool(self.blocks(x)))


class SftnModel(Module):
    def __init__(self, teacher: BlockNet, student: BlockNet, branches: Optional[Sequence[int]] = None):
        super().__init__()
        n = teacher.n_blocks
        if student.n_blocks != n:
            raise ArchitectureError(f"teacher has {n} blocks but student has {student.n_blocks}")
        if student.num_classes != teacher.num_classes or student.input_shape != teacher.input_shape:
            raise ArchitectureError("teacher and student must share input geometry and class count")
        active = tuple(range(1, n)) if branches is None else tuple(sorted(set(branches)))
        bad = [i for i in active if not 1 <= i <= n - 1]
        if bad:
            raise ArchitectureError(f"branches must lie in 1..{n - 1} (the last block has no branch), got {bad}")
        self.teacher = teacher
        self.student_descriptor = student.descriptor()
        self.active = active
        self.transforms = Sequential(*(make_transform(teacher.specs[i - 1].output_shape, student.specs[i].input_shape)
                                       for i in active))
        self.branches = Sequential(*(StudentBranch(student, i) for i in active))

    @property
    def n_blocks(self) -> int:
        return self.teacher.n_blocks

    def branch_modules(self) -> list[Module]:
        return [self.transforms, self.branches]

    def init_branches(self, seed: int) -> "SftnModel":
        """Initialise transforms and branches from a stream independent of the teacher's."""
        rng = np.random.default_rng([int(seed), 0xB4A])
        he_normal_(self.transforms, rng)
        he_normal_(self.branches, rng)
        return self


def build_sftn(teacher: BlockNet, student: BlockNet, seed: int, branches: Optional[Sequence[int]] = None,
               init_teacher: bool = True) -> SftnModel:
    """Assemble an SFTN model; the teacher gets exactly the init a standard run with ``seed`` would."""
    if init_teacher:
        init_params(teacher, seed)
    return SftnModel(teacher, student, branches).init_branches(seed)


@dataclass
class SftnOutputs:
    logits: Tensor
    branch_logits: dict[int, Tensor]
    tau_tilde: float

    def log_q_t(self, tau: Optional[float] = None) -> Tensor:
        return log_softmax_tempered(self.logits, self.tau_tilde if tau is None else tau)

    def log_q_r(self, i: int, tau: Optional[float] = None) -> Tensor:
        return log_softmax_tempered(self.branch_logits[i], self.tau_tilde if tau is None else tau)

    @property
    def q_t(self) -> np.ndarray:
        return np.exp(self.log_q_t().data)

    @property
    def q_r(self) -> dict[int, np.ndarray]:
        return {i: np.exp(self.log_q_r(i).data) for i in self.branch_logits}


def sftn_forward(model: SftnModel, batch: Tensor, tau_tilde: float = 1.0, trunk_frozen: bool = False) -> SftnOutputs:
    """Teacher logits plus one logit set per active branch.

    With ``trunk_frozen`` the teacher runs without recording a graph, so only
    transforms and branches receive gradients.
    """
    if not tau_tilde > 0:
        raise ConfigError(f"tau_tilde must be positive, got {tau_tilde}")
    if trunk_frozen:
        with T.no_grad():
            taps = model.teacher.forward_with_taps(batch)
    else:
        taps = model.teacher.forward_with_taps(batch)
    branch_logits = {}
    for i, transform, branch in zip(model.active, model.transforms.layers, model.branches.layers):
        branch_logits[i] = branch(transform(taps.features[i - 1]))
    return SftnOutputs(taps.logits, branch_logits, tau_tilde)


def sftn_loss(outputs: SftnOutputs, labels, cfg: LossConfig) -> tuple[Tensor, dict[str, float]]:
    """Weighted teacher CE + branch KL + branch CE, averaged over active branches."""
    labels = np.asarray(labels)
    if len(labels) == 0 or outputs.logits.shape[0] == 0:
        raise ConfigError("empty batch")
    if cfg.branches is not None and set(cfg.branches) != set(outputs.branch_logits):
        raise ConfigError(f"loss config branches {cfg.branches} differ from model branches {sorted(outputs.branch_logits)}")
    loss_t = nll(outputs.log_q_t(1.0), labels)
    n_br = len(outputs.branch_logits)
    if n_br == 0:
        raise ConfigError("model has no student branches")
    log_qt_soft = outputs.log_q_t()
    kl_terms = [kl_div(outputs.log_q_r(i), log_qt_soft) for i in outputs.branch_logits]
    ce_terms = [nll(outputs.log_q_r(i, 1.0), labels) for i in outputs.branch_logits]
    loss_kl = _mean_terms(kl_terms)
    loss_ce = _mean_terms(ce_terms)
    total = loss_t * cfg.lambda_t + loss_kl * cfg.lambda_kl + loss_ce * cfg.lambda_ce
    parts = {"L_T": loss_t.item(), "L_R_KL": loss_kl.item(), "L_R_CE": loss_ce.item()}
    return total, parts


def _mean_terms(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / len(terms))


# -- training --------------------------------------------------------------------------------

@dataclass
class TeacherResult:
    teacher: BlockNet
    history: list[EpochLog]
    info: dict = field(default_factory=dict)


def train_sftn(model: SftnModel, dataset: Dataset, sgd: SgdConfig, cfg: LossConfig, seed: int,
               on_epoch: Optional[Callable[[EpochLog], None]] = None) -> TeacherResult:
    """Student-aware training; returns a deep copy of the trunk with branches discarded."""
    if len(dataset) == 0:
        raise ConfigError("empty dataset")
    model.train()
    opt = SGD.for_module(model, sgd)

    def step(xb, yb):
        return sftn_loss(sftn_forward(model, xb, cfg.tau_tilde), yb, cfg)

    history = run_epochs(step, opt, dataset, sgd, seed, on_epoch)
    teacher = model.teacher.clone().eval()
    return TeacherResult(teacher, history, {"mode": "sftn", "loss": cfg.to_dict(), "sgd": sgd.to_dict(),
                                            "seed": seed, "dataset": dataset.id})


def finetune_sftn_from_pretrained(pretrained: BlockNet, student: BlockNet, dataset: Dataset, sgd: SgdConfig,
                                  cfg: LossConfig, seed: int, epochs_branch_only: int, epochs_joint: int,
                                  on_epoch: Optional[Callable[[EpochLog], None]] = None) -> TeacherResult:
    """Attach fresh branches to a trained teacher, warm them up alone, then fine-tune jointly.

    Phase 1 keeps the trunk fully inert (no gradient, eval-mode batchnorm);
    phase 2 optimizes every parameter under the full objective.
    """
    if epochs_branch_only < 0 or epochs_joint < 0:
        raise ConfigError("epoch counts must be nonnegative")
    teacher = pretrained.clone()
    model = SftnModel(teacher, student, cfg.branches).init_branches(seed)
    trunk_hashes = []

    # phase 1: transforms and branches only, constant learning rate
    p1 = sgd.rescaled(epochs_branch_only)
    model.train()
    model.teacher.eval()
    params = model.transforms.parameters() + model.branches.parameters()
    decay = model.transforms.decay_mask() + model.branches.decay_mask()
    opt = SGD(params, p1, decay)

    def branch_step(xb, yb):
        return sftn_loss(sftn_forward(model, xb, cfg.tau_tilde, trunk_frozen=True), yb, cfg)

    def record(entry: EpochLog):
        trunk_hashes.append(checkpoint_hash(model.teacher))
        entry.metrics["phase"] = 1
        if on_epoch:
            on_epoch(entry)

    hist1 = run_epochs(branch_step, opt, dataset, p1, seed, record, lr_schedule=lambda e: p1.lr)

    # phase 2: everything, with the usual step schedule compressed to the phase length
    p2 = sgd.rescaled(epochs_joint)
    model.train()
    opt = SGD.for_module(model, p2)

    def joint_step(xb, yb):
        return sftn_loss(sftn_forward(model, xb, cfg.tau_tilde), yb, cfg)

    def record2(entry: EpochLog):
        entry.metrics["phase"] = 2
        if on_epoch:
            on_epoch(entry)

    hist2 = run_epochs(joint_step, opt, dataset, p2, seed + 1, record2)
    info = {"mode": "sftn-ft", "loss": cfg.to_dict(), "sgd": sgd.to_dict(), "seed": seed, "dataset": dataset.id,
            "epochs_branch_only": epochs_branch_only, "epochs_joint": epochs_joint,
            "phase1_trunk_hashes": trunk_hashes}
    return TeacherResult(model.teacher.clone().eval(), hist1 + hist2, info)
