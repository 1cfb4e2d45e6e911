"""Task loss, load-balancing loss, and the combined objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gse.core import RoutingBatch, RoutingResult

__all__ = [
    "LossReport",
    "RoutingBatchStats",
    "accumulate_stats",
    "balance_loss",
    "balance_logit_grad",
    "l1_loss",
    "selection_entropy",
    "stats_from_batch",
    "total_loss",
]


@dataclass(frozen=True)
class RoutingBatchStats:
    tokens: int
    selection_counts: np.ndarray
    prob_sums: np.ndarray
    k: int

    @property
    def freq(self) -> np.ndarray:
        return self.selection_counts / self.tokens

    @property
    def mass(self) -> np.ndarray:
        return self.prob_sums / self.tokens

    def merge(self, other: "RoutingBatchStats") -> "RoutingBatchStats":
        if other.k != self.k:
            raise ValueError(f"cannot merge stats with k={self.k} and k={other.k}")
        return RoutingBatchStats(
            self.tokens + other.tokens,
            self.selection_counts + other.selection_counts,
            self.prob_sums + other.prob_sums,
            self.k,
        )


@dataclass(frozen=True)
class LossReport:
    task_term: float
    balance_terms: tuple[float, ...]
    total: float
    alpha: float


def l1_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error and its subgradient, taking sign(0) = 0."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def accumulate_stats(routings) -> RoutingBatchStats:
    routings = list(routings)
    if not routings:
        raise ValueError("cannot accumulate routing statistics over an empty batch")
    ks = {r.k for r in routings}
    if len(ks) != 1:
        raise ValueError(f"mixed top-k values in one batch: {sorted(ks)}")
    num_experts = routings[0].full_probs.shape[0]
    counts = np.zeros(num_experts, dtype=np.int64)
    for r in routings:
        counts[list(r.selected)] += 1
    probs = np.sum([r.full_probs for r in routings], axis=0)
    return RoutingBatchStats(len(routings), counts, probs, ks.pop())


def stats_from_batch(routing: RoutingBatch) -> RoutingBatchStats:
    if len(routing) == 0:
        raise ValueError("cannot accumulate routing statistics over an empty batch")
    return RoutingBatchStats(
        tokens=len(routing),
        selection_counts=routing.mask.sum(axis=0).astype(np.int64),
        prob_sums=routing.full_probs.sum(axis=0),
        k=routing.k,
    )


def balance_loss(stats: RoutingBatchStats, num_experts: int) -> float:
    """``E * sum_i f_i * P_i`` with hard selection frequency f and mean soft mass P."""
    if stats.tokens <= 0:
        raise ValueError("balance loss undefined for zero tokens")
    # counts times raw sums, divided once: exact whenever the inputs are small integers
    raw = float(np.dot(stats.selection_counts.astype(np.float64), stats.prob_sums))
    return num_experts * raw / (stats.tokens * stats.tokens)


def balance_logit_grad(routing: RoutingBatch) -> np.ndarray:
    """Gradient of the balance loss w.r.t. router logits, ``(T, E)``.

    The selection frequencies are counts and carry no gradient; only the mean
    routing mass is differentiated, through the full softmax.
    """
    t, num_experts = routing.full_probs.shape
    f = routing.mask.sum(axis=0) / t
    c = num_experts * f / t
    p = routing.full_probs
    return p * (c[None, :] - (p @ c)[:, None])


def total_loss(task: float, balances, alpha: float = 0.01) -> LossReport:
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    balances = tuple(float(b) for b in balances)
    return LossReport(task, balances, task + alpha * sum(balances), alpha)


def selection_entropy(stats: RoutingBatchStats) -> float:
    """Shannon entropy (nats) of the normalized selection frequencies."""
    q = stats.selection_counts / stats.selection_counts.sum()
    q = q[q > 0]
    return float(-np.sum(q * np.log(q)))
