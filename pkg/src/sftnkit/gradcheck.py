"""Central finite-difference checks against the analytic backward pass."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, no_grad


class GradCheckError(ArithmeticError):
    """The checked function is not finite near the evaluation point."""


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``point`` must be 64-bit; it is used as the differentiated leaf.
    """
    return grad_check_many(lambda: f(point), [point], eps)


def grad_check_many(loss_fn: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = 1e-5,
                    max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Check gradients of a zero-argument loss w.r.t. several leaves at once.

    With ``max_coords`` set, each leaf is probed at a random subset of that many
    coordinates (drawn from ``rng``) instead of exhaustively.
    """
    for leaf in leaves:
        if leaf.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 leaves, got {leaf.dtype}")
        leaf.requires_grad = True
        leaf.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise GradCheckError("function is not finite at the evaluation point")
    loss.backward()
    rng = rng or np.random.default_rng(0)

    worst = 0.0
    for leaf in leaves:
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        flat = leaf.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        numeric = np.empty(len(coords))
        for k, idx in enumerate(coords):
            orig = flat[idx]
            with no_grad():
                flat[idx] = orig + eps
                hi = loss_fn().item()
                flat[idx] = orig - eps
                lo = loss_fn().item()
                flat[idx] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise GradCheckError(f"function is not finite within eps of coordinate {idx}")
            numeric[k] = (hi - lo) / (2.0 * eps)
        worst = max(worst, _relative_error(analytic.reshape(-1)[coords], numeric))
    return worst
