"""Task loss and the task/expert mutual-information routing regularizer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tt
from .tensor import ShapeError, Tensor

DEFAULT_MI_WEIGHT = 0.01


def task_loss(prediction, target, kind: str = "mse") -> Tensor:
    """Mean squared error over every element."""
    if kind != "mse":
        raise ValueError(f"unsupported task loss {kind!r}")
    prediction = prediction if isinstance(prediction, Tensor) else Tensor(prediction)
    target = target if isinstance(target, Tensor) else Tensor(target)
    if prediction.shape != target.shape:
        raise ShapeError(f"task_loss: prediction {prediction.shape} vs target {target.shape}")
    diff = tt.subtract(prediction, target)
    return tt.mean(tt.multiply(diff, diff))


@dataclass
class RoutingStats:
    """Batch-averaged P(e|t) (tasks x experts) plus the task prior P(t)."""

    p_expert_given_task: Tensor
    task_prior: np.ndarray | None = None

    def __post_init__(self):
        p = self.p_expert_given_task
        if not isinstance(p, Tensor):
            p = self.p_expert_given_task = Tensor(p)
        if p.data.ndim != 2:
            raise ShapeError(f"P(e|t) must be a matrix, got shape {p.shape}")
        n_tasks = p.shape[0]
        if self.task_prior is None:
            self.task_prior = np.full(n_tasks, 1.0 / n_tasks)
        self.task_prior = np.asarray(self.task_prior, dtype=np.float64)
        if self.task_prior.shape != (n_tasks,):
            raise ShapeError(f"task prior must have {n_tasks} entries")

    def check(self, tol: float = 1e-9) -> None:
        p = self.p_expert_given_task.data
        if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, atol=tol, rtol=0):
            raise ValueError("rows of P(e|t) must be nonnegative and sum to 1")


def routing_stats(weights_per_task: Sequence[Tensor]) -> RoutingStats:
    """Average each task's (B, N) gating weights over tokens and renormalize rows.

    Rows are renormalized so variants whose active weights do not sum to 1
    (baseline, naive shared) still give a proper distribution.
    """
    rows = [tt.mean(w, axis=0, keepdims=True) for w in weights_per_task]
    p = tt.concat(rows, axis=0)
    row_sum = tt.tsum(p, axis=1, keepdims=True)
    p = tt.multiply(p, tt.exp(tt.scale(tt.log(row_sum), -1.0)))
    return RoutingStats(p)


def _xlogx(v: Tensor) -> Tensor:
    # 0 log 0 := 0; the shift only touches exact zeros, where it also zeroes the gradient
    shift = Tensor((v.data == 0).astype(np.float64))
    return tt.multiply(v, tt.log(tt.add(v, shift)))


def mutual_information(stats: RoutingStats) -> Tensor:
    """I(T;E) in nats for the joint P(t, e) = P(t) P(e|t)."""
    p = stats.p_expert_given_task
    prior = stats.task_prior
    joint = tt.multiply(p, Tensor(prior[:, None]))
    p_e = tt.tsum(joint, axis=0)
    with np.errstate(divide="ignore"):
        log_prior = np.where(prior > 0, np.log(prior), 0.0)
    cross = tt.tsum(tt.multiply(joint, Tensor(log_prior[:, None])))
    return tt.subtract(tt.subtract(tt.tsum(_xlogx(joint)), cross), tt.tsum(_xlogx(p_e)))


def mutual_information_loss(stats: RoutingStats) -> Tensor:
    return tt.scale(mutual_information(stats), -1.0)


def total_loss(task_losses: Sequence[Tensor | float], mi_loss: Tensor | float, mi_weight: float = DEFAULT_MI_WEIGHT) -> Tensor:
    """Mean of the task losses plus ``mi_weight`` times the MI loss."""
    if mi_weight < 0:
        raise ValueError("mi_weight must be nonnegative")
    # lift each scalar to shape (1,) so they can be concatenated
    parts = [tt.add(Tensor(np.zeros(1)), t) for t in task_losses]
    avg = tt.mean(tt.concat(parts, axis=0))
    if mi_weight == 0:
        return avg
    return tt.add(avg, tt.scale(mi_loss, mi_weight))
