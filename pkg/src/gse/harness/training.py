"""Mini-batch training loop and run records."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from gse.autograd import OptimState, apply_step
from gse.harness.tasks import Dataset, Task
from gse.losses import (
    balance_loss,
    l1_loss,
    selection_entropy,
    stats_from_batch,
    total_loss,
)
from gse.numkit import RngStream

__all__ = ["RunRecord", "StepMetrics", "TrainConfig", "evaluate", "train"]

SCHEMA_VERSION = "gse-run/1"
_BATCH_STREAM = 21


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 3e-3
    lr_dense: float = 3e-3
    schedule: str = "cosine"
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class StepMetrics:
    step: int
    task_loss: float
    balance_loss_sum: float
    total_loss: float
    expert_freq: tuple[float, ...]


@dataclass
class RunRecord:
    config: dict
    seeds: dict
    trainable_params: int
    num_experts: int
    steps: list[StepMetrics] = field(default_factory=list)
    initial_val_loss: float = float("nan")
    final_val_loss: float = float("nan")
    final_val_freq: tuple[float, ...] = ()
    final_val_entropy: float = float("nan")
    status: str = "ok"
    failed_step: int | None = None
    error: str | None = None
    wall_clock: float = 0.0
    verification: dict = field(default_factory=dict)
    schema: str = SCHEMA_VERSION


@dataclass(frozen=True)
class Evaluation:
    loss: float
    freq: tuple[float, ...]
    entropy: float


def evaluate(adapter, data: Dataset) -> Evaluation:
    y, routing = adapter.forward_batch(data.inputs)
    loss, _ = l1_loss(y, data.targets)
    if routing is None or routing.k == routing.logits.shape[1]:
        return Evaluation(loss, (), float("nan"))
    stats = stats_from_batch(routing)
    return Evaluation(loss, tuple(float(f) for f in stats.freq), selection_entropy(stats))


def train(adapter, task: Task, cfg: TrainConfig, extra_config: dict | None = None):
    """Train ``adapter`` on ``task.train`` with the L1 + balance objective.

    Returns ``(trained_adapter, RunRecord)``. A non-finite loss stops the run
    with ``status="diverged"`` and the offending step recorded.
    """
    t0 = time.perf_counter()
    opt = OptimState(
        kind=cfg.optimizer,
        lrs={"adapter": cfg.lr, "dense": cfg.lr_dense},
        groups=adapter.param_groups(),
        schedule=cfg.schedule,
        total_steps=cfg.steps,
    )
    layer = getattr(adapter, "layer", None)
    num_experts = layer.num_experts if layer is not None and layer.router is not None else 0
    # the auxiliary weight belongs to the layer config; routerless adapters have none
    alpha = layer.config.alpha if num_experts else 0.0
    record = RunRecord(
        config={"train": cfg.to_dict(), "task": task.spec.to_dict(), "kind": adapter.kind, **(extra_config or {})},
        seeds={"task": task.spec.seed, "train": cfg.seed},
        trainable_params=adapter.trainable_count(),
        num_experts=num_experts,
    )
    record.initial_val_loss = evaluate(adapter, task.val).loss

    gen = RngStream(cfg.seed, _BATCH_STREAM).generator()
    data = task.train
    n_train = len(data)
    for step in range(cfg.steps):
        idx = gen.integers(0, n_train, size=cfg.batch_size)
        xb, yb = data.inputs[idx], data.targets[idx]
        pred, routing = adapter.forward_batch(xb)
        task_term, dy = l1_loss(pred, yb)
        balances, freq = [], ()
        if num_experts:
            stats = stats_from_batch(routing)
            balances.append(balance_loss(stats, num_experts))
            freq = tuple(float(f) for f in stats.freq)
        report = total_loss(task_term, balances, alpha)
        if not np.isfinite(report.total):
            record.status, record.failed_step = "diverged", step
            record.error = f"non-finite loss {report.total!r} at step {step}"
            break
        grads = adapter.backward(xb, dy, routing, alpha)
        params, opt = apply_step(adapter.params(), grads, opt)
        adapter = adapter.with_params(params)
        record.steps.append(
            StepMetrics(step, task_term, float(sum(balances)), report.total, freq)
        )

    final = evaluate(adapter, task.val)
    record.final_val_loss = final.loss
    record.final_val_freq = final.freq
    record.final_val_entropy = final.entropy
    if not np.isfinite(final.loss) and record.status == "ok":
        record.status, record.failed_step = "diverged", cfg.steps
        record.error = "non-finite validation loss"
    record.wall_clock = time.perf_counter() - t0
    return adapter, record
