"""Teacher/student analysis: accuracy, KL, linear CKA, agreement, entropy, linear probes."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .blocknet import BlockNet
from .checkpoint import checkpoint_hash
from .data import Dataset, iterate
from .losses import cross_entropy, np_entropy_rows, np_kl_rows, np_log_softmax
from .nn import Linear, Module
from .tensor import Tensor
from .trainer import SGD, SgdConfig, run_epochs


class MetricError(ValueError):
    pass


def _require(ds: Dataset) -> None:
    if len(ds) == 0:
        raise MetricError("empty dataset")


def predict_logits(model: Module, ds: Dataset, batch_size: int = 500) -> np.ndarray:
    """Eval-mode logits for every sample; the model's train/eval flag is restored afterwards."""
    _require(ds)
    was_training = model.training
    model.eval()
    out = []
    with T.no_grad():
        for xb, _ in iterate(ds, batch_size):
            out.append(model(xb).data)
    model.train(was_training)
    return np.concatenate(out).astype(np.float64)


def pooled_features(model: BlockNet, ds: Dataset, batch_size: int = 500) -> np.ndarray:
    """Globally average-pooled last-block activations, (n, C)."""
    _require(ds)
    was_training = model.training
    model.eval()
    out = []
    with T.no_grad():
        for xb, _ in iterate(ds, batch_size):
            out.append(model.pooled_features(xb).data)
    model.train(was_training)
    return np.concatenate(out).astype(np.float64)


def accuracy(model: Module, ds: Dataset) -> float:
    return accuracy_from_logits(predict_logits(model, ds), ds.labels)


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise MetricError("empty dataset")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def kl_from_logits(teacher_logits: np.ndarray, student_logits: np.ndarray) -> float:
    """Mean over samples of KL(q_T || q_S) at temperature 1, in nats."""
    if len(teacher_logits) == 0:
        raise MetricError("empty dataset")
    rows = np_kl_rows(np_log_softmax(teacher_logits), np_log_softmax(student_logits))
    return float(np.mean(np.maximum(rows, 0.0)))


def teacher_student_kl(teacher: Module, student: Module, ds: Dataset) -> float:
    return kl_from_logits(predict_logits(teacher, ds), predict_logits(student, ds))


def entropy_from_logits(logits: np.ndarray) -> float:
    if len(logits) == 0:
        raise MetricError("empty dataset")
    return float(np.mean(np_entropy_rows(np_log_softmax(logits))))


def prediction_entropy(model: Module, ds: Dataset) -> float:
    return entropy_from_logits(predict_logits(model, ds))


def top1_agreement_from_logits(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) == 0:
        raise MetricError("empty dataset")
    return float(np.mean(np.argmax(a, axis=1) == np.argmax(b, axis=1)))


def top1_agreement(teacher: Module, student: Module, ds: Dataset) -> float:
    return top1_agreement_from_logits(predict_logits(teacher, ds), predict_logits(student, ds))


def cka_linear(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA between (n, p) and (n, q) activations; columns are centred here."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or len(x) != len(y):
        raise MetricError(f"cka_linear needs two 2-D arrays with equal rows, got {x.shape} and {y.shape}")
    if len(x) < 3:
        raise MetricError(f"cka_linear needs at least 3 samples, got {len(x)}")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    cross = np.linalg.norm(yc.T @ xc) ** 2
    denom = np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc)
    if denom == 0:
        raise MetricError("cka_linear: zero-variance input")
    return float(cross / denom)


@dataclass
class SimilarityReport:
    mean_kl: float
    cka: float
    top1_agreement: float
    teacher_entropy: float
    student_entropy: float
    kl_reduction: str = "mean-per-sample"

    def __post_init__(self):
        if self.mean_kl < 0 or not 0 <= self.cka <= 1 + 1e-9 or not 0 <= self.top1_agreement <= 1:
            raise MetricError(f"similarity values out of range: {self}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_rows(self, teacher_method: str) -> list[dict]:
        return [{"teacher_method": teacher_method, "metric": k, "value": repr(v)}
                for k, v in self.to_dict().items() if k != "kl_reduction"]


def similarity_report(teacher: BlockNet, student: BlockNet, ds: Dataset) -> SimilarityReport:
    t_logits, s_logits = predict_logits(teacher, ds), predict_logits(student, ds)
    return SimilarityReport(
        mean_kl=kl_from_logits(t_logits, s_logits),
        cka=cka_linear(pooled_features(teacher, ds), pooled_features(student, ds)),
        top1_agreement=top1_agreement_from_logits(t_logits, s_logits),
        teacher_entropy=entropy_from_logits(t_logits),
        student_entropy=entropy_from_logits(s_logits),
    )


def similarity_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["teacher_method", "metric", "value"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


# -- linear probe -------------------------------------------------------------------------

class _Probe(Module):
    def __init__(self, mean: np.ndarray, std: np.ndarray, k: int):
        super().__init__()
        self.mean, self.std = mean, std
        self.linear = Linear(len(mean), k)  # zero-initialised: an untrained probe predicts class 0

    def forward(self, feats: Tensor) -> Tensor:
        return self.linear((feats - self.mean) / self.std)


def linear_probe_transfer(extractor: BlockNet, train: Dataset, test: Dataset, epochs: int = 30,
                          sgd: Optional[SgdConfig] = None, seed: int = 0) -> float:
    """Train a linear classifier on frozen pooled last-block features; return test accuracy.

    The probe head is sized from the target dataset's class count, so source
    and target may differ in K.  The extractor is verified unchanged.
    """
    if train.num_classes != test.num_classes:
        raise MetricError("probe train/test class counts differ")
    before = checkpoint_hash(extractor)
    f_train = pooled_features(extractor, train).astype(np.float32)
    f_test = pooled_features(extractor, test).astype(np.float32)
    mean = f_train.mean(axis=0)
    std = f_train.std(axis=0) + 1e-6
    probe = _Probe(mean, std, test.num_classes)
    cfg = sgd or SgdConfig(lr=0.05, momentum=0.9, weight_decay=5e-4, epochs=epochs,
                           milestones=tuple(sorted({m for m in (int(epochs * 0.6), int(epochs * 0.8)) if 0 < m < epochs})),
                           batch_size=64)
    cfg = cfg if cfg.epochs == epochs else cfg.rescaled(epochs)
    feats_ds = Dataset(f_train[:, :, None, None], train.labels, train.num_classes)
    opt = SGD.for_module(probe, cfg)

    def step(xb, yb):
        loss = cross_entropy(probe(T.reshape(xb, (xb.shape[0], -1))), yb)
        return loss, {}

    run_epochs(step, opt, feats_ds, cfg, seed)
    with T.no_grad():
        logits = probe(Tensor(f_test)).data
    if checkpoint_hash(extractor) != before:
        raise RuntimeError("feature extractor changed during probing")
    return accuracy_from_logits(logits, test.labels)
