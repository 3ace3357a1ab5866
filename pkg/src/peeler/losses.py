"""Closed-set cross-entropy, open-set negative entropy and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

# exp() underflows to exactly 0 below this; such terms contribute nothing
UNDERFLOW_LOG = -745.0

REDUCTIONS = ("mean", "sum")


def _reduce(x: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return T.mean(x)
    if reduction == "sum":
        return T.sum(x)
    raise ValueError(f"unknown reduction {reduction!r}; expected one of {REDUCTIONS}")


def cross_entropy(log_probs: Tensor, labels, reduction: str = "mean") -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    n_cls = log_probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"labels must lie in [0, {n_cls})")
    return _reduce(-T.gather_rows(log_probs, labels), reduction)


def open_set_entropy_loss(log_probs: Tensor, reduction: str = "mean") -> Tensor:
    """Negative posterior entropy, sum_k p_k log p_k, reduced over open queries.

    Minimizing it pushes the seen-class posterior of unseen samples toward uniform.
    """
    safe = T.masked_fill(log_probs, ~(log_probs.data >= UNDERFLOW_LOG), 0.0)
    plogp = T.exp(safe) * safe
    return _reduce(T.sum(plogp, axis=1), reduction)


@dataclass(eq=False)
class LossBreakdown:
    closed_ce: Tensor
    open_entropy_term: Tensor | None
    lam: float
    total: Tensor

    def as_record(self) -> dict:
        return {
            "closed_ce": float(self.closed_ce.data),
            "open_entropy": None if self.open_entropy_term is None else float(self.open_entropy_term.data),
            "lambda": self.lam,
            "total": float(self.total.data),
        }


def combined_loss(
    closed_log_probs: Tensor,
    closed_labels,
    open_log_probs: Tensor | None,
    lam: float = 0.5,
    reduction: str = "mean",
) -> LossBreakdown:
    """closed cross-entropy + lam * open-set negative entropy."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    ce = cross_entropy(closed_log_probs, closed_labels, reduction)
    if open_log_probs is None or open_log_probs.shape[0] == 0:
        return LossBreakdown(ce, None, float(lam), ce)
    op = open_set_entropy_loss(open_log_probs, reduction)
    return LossBreakdown(ce, op, float(lam), ce + op * float(lam))
