"""Comparison adapters behind one training interface, and budget matching.

Every adapter exposes ``params`` / ``with_params`` (functional updates),
``forward_batch(x) -> (y, routing_or_None)`` and
``backward(x, dy, routing, alpha) -> {name: grad}``, plus ``param_groups`` for
the optimizer's per-group learning rates.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from gse.autograd import backward as gse_backward
from gse.core import GseConfig, GseLayer, build_layer, forward_batch
from gse.losses import balance_logit_grad
from gse.numkit import RngStream, as_matrix, gaussian_matrix, svd

__all__ = [
    "AdapterSpec",
    "build_adapter",
    "FullFineTune",
    "GseAdapter",
    "LowRankAdapter",
    "build_full_ft",
    "build_gse",
    "build_lora",
    "build_pissa_style",
    "gse_param_count",
    "match_budget",
]

LORA_INIT_STD = 0.02
BUDGET_TOLERANCE = 0.03
KINDS = ("gse", "lora", "pissa_style", "full_ft")


@dataclass(frozen=True)
class GseAdapter:
    layer: GseLayer
    kind: str = "gse"

    def params(self):
        return self.layer.params()

    def with_params(self, p) -> "GseAdapter":
        return dataclasses.replace(self, layer=self.layer.with_params(p))

    def param_groups(self) -> dict[str, str]:
        return {k: "adapter" for k in self.params()}

    def trainable_count(self) -> int:
        return self.layer.trainable_count()

    def forward_batch(self, x):
        return forward_batch(self.layer, x)

    def backward(self, x, dy, routing, alpha: float = 0.0):
        extra = None
        if alpha > 0 and self.layer.router is not None:
            extra = alpha * balance_logit_grad(routing)
        return gse_backward(self.layer, x, dy, routing, extra).as_dict()


@dataclass(frozen=True)
class LowRankAdapter:
    """``y = backbone x + scale * B A x`` with only ``B`` and ``A`` trainable."""

    backbone: np.ndarray
    b: np.ndarray
    a: np.ndarray
    scale: float
    kind: str = "lora"

    def params(self):
        return {"b": self.b, "a": self.a}

    def with_params(self, p) -> "LowRankAdapter":
        return dataclasses.replace(self, b=p["b"], a=p["a"])

    def param_groups(self) -> dict[str, str]:
        return {"b": "adapter", "a": "adapter"}

    def trainable_count(self) -> int:
        return int(self.b.size + self.a.size)

    def equivalent_weight(self) -> np.ndarray:
        return self.backbone + self.scale * (self.b @ self.a)

    def forward_batch(self, x):
        return x @ self.backbone.T + self.scale * ((x @ self.a.T) @ self.b.T), None

    def backward(self, x, dy, routing=None, alpha: float = 0.0):
        return {
            "b": self.scale * (dy.T @ (x @ self.a.T)),
            "a": self.scale * ((dy @ self.b).T @ x),
        }


@dataclass(frozen=True)
class FullFineTune:
    w: np.ndarray
    kind: str = "full_ft"

    def params(self):
        return {"w": self.w}

    def with_params(self, p) -> "FullFineTune":
        return dataclasses.replace(self, w=p["w"])

    def param_groups(self) -> dict[str, str]:
        return {"w": "dense"}

    def trainable_count(self) -> int:
        return int(self.w.size)

    def forward_batch(self, x):
        return x @ self.w.T, None

    def backward(self, x, dy, routing=None, alpha: float = 0.0):
        return {"w": dy.T @ x}


def _check_rank(w0: np.ndarray, rank: int) -> None:
    if not 1 <= rank <= min(w0.shape):
        raise ValueError(f"rank {rank} outside [1, {min(w0.shape)}] for a {w0.shape} weight")


def build_gse(w0, config: GseConfig) -> GseAdapter:
    return GseAdapter(build_layer(w0, config))


def build_lora(w0, rank: int, scale: float = 1.0, rng: RngStream | None = None) -> LowRankAdapter:
    w0 = as_matrix(w0, "w0")
    _check_rank(w0, rank)
    rng = rng or RngStream(0)
    b = gaussian_matrix(w0.shape[0], rank, LORA_INIT_STD, rng)
    a = np.zeros((rank, w0.shape[1]))
    return LowRankAdapter(backbone=w0.copy(), b=b, a=a, scale=float(scale), kind="lora")


def build_pissa_style(w0, rank: int, rng: RngStream | None = None) -> LowRankAdapter:
    """Top-``rank`` singular triplets as the trainable pair; the rest stays frozen.

    ``rng`` is accepted for interface symmetry; the construction is deterministic.
    """
    w0 = as_matrix(w0, "w0")
    _check_rank(w0, rank)
    dec = svd(w0)
    root = np.sqrt(dec.sigma[:rank])
    b = np.ascontiguousarray(dec.u[:, :rank] * root)
    a = np.ascontiguousarray(root[:, None] * dec.v[:, :rank].T)
    return LowRankAdapter(backbone=w0 - b @ a, b=b, a=a, scale=1.0, kind="pissa_style")


def build_full_ft(w0) -> FullFineTune:
    return FullFineTune(as_matrix(w0, "w0").copy())


# ---------------------------------------------------------------------------
# Budget matching


@dataclass(frozen=True)
class AdapterSpec:
    kind: str
    rank: int
    param_count: int
    target_count: int
    within_budget: bool
    config: GseConfig | None = None

    @property
    def rel_gap(self) -> float:
        return (self.param_count - self.target_count) / self.target_count


def gse_param_count(shape: tuple[int, int], config: GseConfig) -> int:
    m, n = shape
    r_g, num_experts, _ = config.layout
    count = (r_g + num_experts * config.d) * (m + n)
    if config.routed:
        count += num_experts * n
    return count


def match_budget(shape: tuple[int, int], config: GseConfig) -> dict[str, AdapterSpec]:
    """Ranks for each baseline whose trainable count is closest to the GSE count.

    Ties go to the smaller rank. If no rank lands within 3% the closest one is
    returned with ``within_budget=False``.
    """
    m, n = shape
    target = gse_param_count(shape, config)
    best_rank = min(range(1, min(m, n) + 1), key=lambda r: (abs(r * (m + n) - target), r))
    count = best_rank * (m + n)
    ok = abs(count - target) <= BUDGET_TOLERANCE * target
    r_g, num_experts, _ = config.layout
    return {
        "gse": AdapterSpec("gse", r_g + num_experts * config.d, target, target, True, config),
        "lora": AdapterSpec("lora", best_rank, count, target, ok),
        "pissa_style": AdapterSpec("pissa_style", best_rank, count, target, ok),
        "full_ft": AdapterSpec("full_ft", min(m, n), m * n, target, False),
    }


def build_adapter(kind: str, w0, config: GseConfig, rng: RngStream, lora_scale: float = 1.0):
    """Construct ``kind`` at the budget matched to ``config`` on ``w0``."""
    if kind not in KINDS:
        raise ValueError(f"unknown adapter kind {kind!r}; expected one of {KINDS}")
    if kind == "gse":
        return build_gse(w0, config)
    spec = match_budget(np.shape(w0), config)[kind]
    if kind == "lora":
        return build_lora(w0, spec.rank, lora_scale, rng)
    if kind == "pissa_style":
        return build_pissa_style(w0, spec.rank, rng)
    if kind == "full_ft":
        return build_full_ft(w0)

