"""Probability-space losses shared by teacher training and distillation.

Everything works on log-probabilities; nothing is exponentiated and then
re-logged.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _check_temperature(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def log_softmax_tempered(logits: Tensor, tau: float = 1.0) -> Tensor:
    _check_temperature(tau)
    return T.log_softmax(logits if tau == 1.0 else logits * (1.0 / tau), axis=-1)


def softmax_tempered(logits, tau: float = 1.0) -> Tensor:
    """softmax(logits / tau) along the last axis."""
    logits = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits, dtype=np.float64))
    return T.exp(log_softmax_tempered(logits, tau))


def one_hot(labels, k: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.shape[0], k), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def nll(log_probs: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels."""
    b = log_probs.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    mask = one_hot(labels, log_probs.shape[1], log_probs.dtype)
    return -(log_probs * mask).sum() * (1.0 / b)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return nll(T.log_softmax(logits, axis=-1), labels)


def kl_div(log_p: Tensor, log_q: Tensor) -> Tensor:
    """Batch-mean KL(p || q) from log-probabilities of shape (B, K)."""
    b = log_p.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    return (T.exp(log_p) * (log_p - log_q)).sum() * (1.0 / b)


# -- numpy helpers for evaluation ------------------------------------------------

def np_log_softmax(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def np_kl_rows(log_p: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    """Per-row KL(p || q); zero-probability entries of p contribute nothing."""
    p = np.exp(log_p)
    return (p * np.where(p > 0, log_p - log_q, 0.0)).sum(axis=-1)


def np_entropy_rows(log_p: np.ndarray) -> np.ndarray:
    p = np.exp(log_p)
    return -(p * np.where(p > 0, log_p, 0.0)).sum(axis=-1)
