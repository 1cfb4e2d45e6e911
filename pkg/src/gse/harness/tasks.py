"""Clustered synthetic regression tasks.

Each sample belongs to a cluster ``c``; its input is drawn around a
cluster-specific mean and its target is ``(W0 + delta_c) x + noise`` where
``delta_c`` is a low-rank shift. A single linear map cannot fit every cluster,
while a router that separates clusters can pick per-cluster corrections.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from gse.numkit import RngStream, gaussian_matrix

__all__ = ["Dataset", "Task", "TaskSpec", "make_task", "oracle_predict"]

# stream labels under RngStream(spec.seed)
_W0, _DELTA, _MEANS, _TRAIN, _VAL = 11, 12, 13, 14, 15


@dataclass(frozen=True)
class TaskSpec:
    m: int = 64
    n: int = 64
    num_clusters: int = 7
    cluster_rank: int = 2
    noise_std: float = 0.01
    samples_train: int = 4096
    samples_val: int = 1024
    seed: int = 0
    shift_ratio: float = 0.3
    cluster_separation: float = 4.0

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError(f"dims must be positive, got ({self.m}, {self.n})")
        if self.num_clusters < 1:
            raise ValueError(f"num_clusters must be >= 1, got {self.num_clusters}")
        if self.cluster_rank < 1:
            raise ValueError(f"cluster_rank must be >= 1, got {self.cluster_rank}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.samples_train < 1 or self.samples_val < 1:
            raise ValueError("sample counts must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    cluster_ids: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class Task:
    spec: TaskSpec
    w0: np.ndarray
    deltas: np.ndarray  # (C, m, n)
    means: np.ndarray  # (C, n)
    train: Dataset
    val: Dataset


def _draw_split(spec, w0, deltas, means, count, rng: RngStream) -> Dataset:
    gen = rng.generator()
    ids = np.arange(count) % spec.num_clusters
    ids = ids[gen.permutation(count)]
    x = means[ids] + gen.standard_normal((count, spec.n))
    y = np.einsum("tmn,tn->tm", w0[None] + deltas[ids], x)
    if spec.noise_std > 0:
        y = y + spec.noise_std * gen.standard_normal((count, spec.m))
    return Dataset(inputs=x, targets=y, cluster_ids=ids)


def make_task(spec: TaskSpec) -> Task:
    root = RngStream(spec.seed)
    m, n = spec.m, spec.n
    w0 = gaussian_matrix(m, n, 1.0, root.substream(_W0)) / (np.sqrt(m) + np.sqrt(n))
    w0_norm = np.linalg.norm(w0)

    dgen = root.substream(_DELTA).generator()
    deltas = []
    for _ in range(spec.num_clusters):
        p = dgen.standard_normal((m, spec.cluster_rank))
        q = dgen.standard_normal((spec.cluster_rank, n))
        delta = p @ q
        deltas.append(delta * (spec.shift_ratio * w0_norm / np.linalg.norm(delta)))
    deltas = np.stack(deltas)

    dirs = root.substream(_MEANS).generator().standard_normal((spec.num_clusters, n))
    means = spec.cluster_separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)

    train = _draw_split(spec, w0, deltas, means, spec.samples_train, root.substream(_TRAIN))
    val = _draw_split(spec, w0, deltas, means, spec.samples_val, root.substream(_VAL))
    return Task(spec=spec, w0=w0, deltas=deltas, means=means, train=train, val=val)


def oracle_predict(task: Task, data: Dataset) -> np.ndarray:
    """Noise-free prediction using each sample's true cluster shift."""
    return np.einsum("tmn,tn->tm", task.w0[None] + task.deltas[data.cluster_ids], data.inputs)
