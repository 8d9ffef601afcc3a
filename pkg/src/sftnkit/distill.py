"""Stage-2 distillation from a frozen teacher into a standalone student."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .blocknet import BlockNet
from .checkpoint import checkpoint_hash
from .data import Dataset
from .losses import cross_entropy, kl_div, log_softmax_tempered
from .nn import Conv2d, Module, Sequential, he_normal_
from .tensor import Tensor
from .trainer import SGD, EpochLog, SgdConfig, run_epochs

log = logging.getLogger(__name__)

METHODS = ("KD", "FitNets", "SP")
DEFAULT_HINT_WEIGHT = {"KD": 0.0, "FitNets": 1.0, "SP": 100.0}


class DistillConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    method: str = "KD"
    tau_kd: float = 4.0
    lambda_kd: float = 1.0
    lambda_hint: Optional[float] = None  # None picks the per-method default
    hint_blocks: Optional[tuple[int, ...]] = None  # 1-based; None = all interior blocks

    def __post_init__(self):
        if self.method not in METHODS:
            raise DistillConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.tau_kd > 0:
            raise DistillConfigError(f"tau_kd must be positive, got {self.tau_kd}")
        if self.lambda_kd < 0:
            raise DistillConfigError(f"lambda_kd must be nonnegative, got {self.lambda_kd}")
        if self.lambda_hint is None:
            object.__setattr__(self, "lambda_hint", DEFAULT_HINT_WEIGHT[self.method])
        elif self.lambda_hint < 0:
            raise DistillConfigError(f"lambda_hint must be nonnegative, got {self.lambda_hint}")
        if self.hint_blocks is not None:
            object.__setattr__(self, "hint_blocks", tuple(sorted(set(int(b) for b in self.hint_blocks))))

    def blocks_for(self, n_blocks: int) -> tuple[int, ...]:
        blocks = self.hint_blocks if self.hint_blocks is not None else tuple(range(1, n_blocks))
        bad = [b for b in blocks if not 1 <= b <= n_blocks]
        if bad:
            raise DistillConfigError(f"hint blocks must lie in 1..{n_blocks}, got {bad}")
        return blocks

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hint_blocks"] = None if self.hint_blocks is None else list(self.hint_blocks)
        return d


# -- losses ----------------------------------------------------------------------------

def kd_loss(student_logits: Tensor, teacher_logits, labels, tau_kd: float = 4.0,
            lambda_kd: float = 1.0) -> Tensor:
    """CE(s, y) + lambda_kd * tau^2 * KL(softmax(t/tau) || softmax(s/tau)); the teacher side is constant."""
    if not tau_kd > 0:
        raise DistillConfigError(f"tau_kd must be positive, got {tau_kd}")
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    t = Tensor(t.astype(student_logits.dtype))
    if t.shape != student_logits.shape:
        raise T.ShapeError(f"kd_loss: student logits {student_logits.shape} vs teacher logits {t.shape}")
    ce = cross_entropy(student_logits, labels)
    if lambda_kd == 0:
        return ce
    with T.no_grad():
        log_pt = log_softmax_tempered(t, tau_kd)
    kl = kl_div(log_pt, log_softmax_tempered(student_logits, tau_kd))
    return ce + kl * (lambda_kd * tau_kd * tau_kd)


def _constant(x) -> Tensor:
    return Tensor(x.data if isinstance(x, Tensor) else np.asarray(x))


def fitnets_hint_loss(student_feats: Sequence[Tensor], teacher_feats: Sequence, regressors: Sequence[Module],
                      hint_blocks: Sequence[int]) -> Tensor:
    """Mean over hinted blocks of MSE(regressor(student feature), teacher feature).

    ``hint_blocks`` are 1-based; ``regressors`` is aligned with it.
    """
    if len(regressors) != len(hint_blocks):
        raise DistillConfigError(f"{len(regressors)} regressors for {len(hint_blocks)} hint blocks")
    terms = []
    for reg, b in zip(regressors, hint_blocks):
        s, t = student_feats[b - 1], _constant(teacher_feats[b - 1])
        if s.shape[2:] != t.shape[2:]:
            raise DistillConfigError(f"block {b}: student spatial size {s.shape[2:]} differs from teacher {t.shape[2:]}")
        diff = reg(s) - t
        terms.append((diff * diff).mean())
    return _mean(terms)


def _row_normalized_gram(a: Tensor) -> Tensor:
    b = a.shape[0]
    flat = T.reshape(a, (b, -1))
    gram = T.matmul(flat, T.transpose(flat))
    norm = T.sqrt((gram * gram).sum(axis=1, keepdims=True))
    return gram / norm


def sp_loss(student_feats: Sequence[Tensor], teacher_feats: Sequence, hint_blocks: Sequence[int]) -> Tensor:
    """Similarity-preserving loss: (1/b^2) * ||G_S - G_T||_F^2 on row-normalised batch Gram matrices."""
    terms = []
    for blk in hint_blocks:
        s, t = student_feats[blk - 1], _constant(teacher_feats[blk - 1])
        b = s.shape[0]
        if b < 2:
            raise DistillConfigError(f"SP needs a batch of at least 2 samples, got {b}")
        with T.no_grad():
            gt = _row_normalized_gram(t)
        diff = _row_normalized_gram(s) - Tensor(gt.data.astype(s.dtype))
        terms.append((diff * diff).sum() * (1.0 / (b * b)))
    return _mean(terms)


def _mean(terms: list[Tensor]) -> Tensor:
    if not terms:
        raise DistillConfigError("no hint blocks selected")
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / len(terms))


def make_regressors(student: BlockNet, teacher: BlockNet, hint_blocks: Sequence[int], seed: int) -> Sequential:
    """1x1 conv regressors mapping student channels to teacher channels at each hinted block."""
    regs = []
    for b in hint_blocks:
        (cs, hs, ws), (ct, ht, wt) = student.specs[b - 1].output_shape, teacher.specs[b - 1].output_shape
        if (hs, ws) != (ht, wt):
            raise DistillConfigError(f"block {b}: student spatial size {(hs, ws)} differs from teacher {(ht, wt)}")
        regs.append(Conv2d(cs, ct, 1, bias=True))
    seq = Sequential(*regs)
    he_normal_(seq, np.random.default_rng([int(seed), 0x4E6]))
    return seq


# -- training -----------------------------------------------------------------------------

@dataclass
class DistillResult:
    student: BlockNet
    history: list[EpochLog]
    teacher_hash: str
    info: dict = field(default_factory=dict)


class _StudentWithRegressors(Module):
    def __init__(self, student: BlockNet, regressors: Optional[Sequential]):
        super().__init__()
        self.student = student
        if regressors is not None:
            self.regressors = regressors


def distill_train(student: BlockNet, teacher: BlockNet, dataset: Dataset, dcfg: DistillConfig, sgd: SgdConfig,
                  seed: int, on_epoch: Optional[Callable[[EpochLog], None]] = None) -> DistillResult:
    """Train ``student`` in place against a frozen ``teacher``.

    Teacher outputs are computed per batch in eval mode without a graph; the
    teacher's checkpoint hash is verified unchanged at the end.
    """
    if student.input_shape != teacher.input_shape or student.num_classes != teacher.num_classes:
        raise DistillConfigError("teacher and student must share input geometry and class count")
    if student.n_blocks != teacher.n_blocks and dcfg.method != "KD":
        raise DistillConfigError("feature distillation needs teacher and student with the same block count")
    before = checkpoint_hash(teacher)
    teacher.eval()
    hint_blocks = dcfg.blocks_for(student.n_blocks) if dcfg.method != "KD" else ()
    regressors = make_regressors(student, teacher, hint_blocks, seed) if dcfg.method == "FitNets" else None
    bundle = _StudentWithRegressors(student, regressors)
    bundle.train()
    opt = SGD.for_module(bundle, sgd)
    hinted = dcfg.method != "KD" and dcfg.lambda_hint > 0

    def step(xb, yb):
        # SP is undefined on a single-sample tail batch
        use_feats = hinted and (dcfg.method != "SP" or len(yb) >= 2)
        with T.no_grad():
            t_out = teacher.forward_with_taps(xb) if use_feats else None
            t_logits = t_out.logits if use_feats else teacher(xb)
        if use_feats:
            s_out = student.forward_with_taps(xb)
            s_logits = s_out.logits
        else:
            s_logits = student(xb)
        loss = kd_loss(s_logits, t_logits, yb, dcfg.tau_kd, dcfg.lambda_kd)
        parts = {"kd_total": loss.item()}
        if use_feats:
            if dcfg.method == "FitNets":
                hint = fitnets_hint_loss(s_out.features, t_out.features, regressors.layers, hint_blocks)
            else:
                hint = sp_loss(s_out.features, t_out.features, hint_blocks)
            parts["hint"] = hint.item()
            loss = loss + hint * dcfg.lambda_hint
        return loss, parts

    history = run_epochs(step, opt, dataset, sgd, seed, on_epoch)
    after = checkpoint_hash(teacher)
    if after != before:
        raise RuntimeError("teacher parameters changed during distillation")
    student.eval()
    info = {"distill": dcfg.to_dict(), "sgd": sgd.to_dict(), "seed": seed, "dataset": dataset.id}
    return DistillResult(student, history, before, info)
