"""GSE layer construction, routing, and the forward pass.

A layer holds the frozen weight adjusted by the expected initial expert
contribution, one always-on generalized expert initialized from the top of the
spectrum, ``E`` routed specialized experts initialized from the following
contiguous rank-``d`` blocks, and a linear router.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from gse.numkit import RngStream, SpectralDecomposition, as_matrix, gaussian_matrix, svd

__all__ = [
    "GeneralizedExpert",
    "GseConfig",
    "GseLayer",
    "Router",
    "RoutingBatch",
    "RoutingResult",
    "SpecializedExpert",
    "SpectralSegment",
    "Variant",
    "build_layer",
    "equivalent_weight",
    "forward",
    "forward_batch",
    "init_generalized",
    "init_specialized",
    "partition_spectrum",
    "residual_shift",
    "route",
    "route_batch",
    "scaling_factors",
]

NO_SVD_INIT_STD = 0.02
# Stream labels under the layer's master stream.
_ROUTER_STREAM = 1
_EXPERT_STREAM_BASE = 100


class Variant(str, Enum):
    FULL = "full"
    NO_SVD_INIT = "no_svd_init"
    NO_GENERALIZED = "no_generalized"
    NO_SPECIALIZED = "no_specialized"
    NO_GRAD_SCALING = "no_grad_scaling"


@dataclass(frozen=True)
class GseConfig:
    """Hyperparameters of one GSE layer.

    Defaults follow the reference configuration: rank-2 generalized expert,
    seven rank-2 specialized experts, top-2 routing, ``s_g = 2``,
    ``s_base = 2`` and auxiliary weight 0.01.
    """

    r_g: int = 2
    d: int = 2
    num_experts: int = 7
    top_k: int = 2
    s_g: float = 2.0
    s_base: float = 2.0
    alpha: float = 0.01
    router_std: float = 0.02
    seed: int = 0
    variant: Variant = Variant.FULL

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.num_experts < 1:
            raise ValueError(f"num_experts must be >= 1, got {self.num_experts}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ValueError(f"top_k must lie in [1, {self.num_experts}], got {self.top_k}")
        if self.r_g < 0:
            raise ValueError(f"r_g must be >= 0, got {self.r_g}")
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not (self.s_g > 0 and self.s_base > 0):
            raise ValueError("s_g and s_base must be positive")
        if not self.router_std > 0:
            raise ValueError(f"router_std must be positive, got {self.router_std}")

    @property
    def layout(self) -> tuple[int, int, int]:
        """``(r_g, E, k)`` after the variant is applied."""
        if self.variant is Variant.NO_GENERALIZED:
            return 0, self.num_experts + 1, self.top_k
        if self.variant is Variant.NO_SPECIALIZED:
            return self.r_g, self.num_experts, self.num_experts
        return self.r_g, self.num_experts, self.top_k

    @property
    def routed(self) -> bool:
        return self.variant is not Variant.NO_SPECIALIZED

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        return d


@dataclass(frozen=True)
class SpectralSegment:
    """Singular triplets ``start <= j < stop`` of the global descending spectrum."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray
    start: int
    stop: int

    @property
    def trace_sigma(self) -> float:
        return float(np.sum(self.sigma))

    @property
    def width(self) -> int:
        return self.stop - self.start

    def product(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


@dataclass(frozen=True)
class GeneralizedExpert:
    b: np.ndarray
    a: np.ndarray
    scale: float

    def product(self) -> np.ndarray:
        return self.scale * (self.b @ self.a)


@dataclass(frozen=True)
class SpecializedExpert:
    b: np.ndarray
    a: np.ndarray
    scale: float
    trace_sigma: float

    def product(self) -> np.ndarray:
        return self.scale * (self.b @ self.a)


@dataclass(frozen=True)
class Router:
    w_z: np.ndarray


@dataclass(frozen=True)
class RoutingResult:
    logits: np.ndarray
    full_probs: np.ndarray
    selected: tuple[int, ...]
    weights: np.ndarray

    @property
    def k(self) -> int:
        return len(self.selected)


@dataclass(frozen=True)
class RoutingBatch:
    """Row-wise routing for a batch; ``mask[t, i]`` marks i in the top-k of token t."""

    logits: np.ndarray
    full_probs: np.ndarray
    mask: np.ndarray
    weights: np.ndarray
    k: int

    def __len__(self) -> int:
        return self.logits.shape[0]

    def row(self, t: int) -> RoutingResult:
        return RoutingResult(
            logits=self.logits[t],
            full_probs=self.full_probs[t],
            selected=tuple(int(i) for i in np.flatnonzero(self.mask[t])),
            weights=self.weights[t],
        )


@dataclass(frozen=True)
class GseLayer:
    w0_adjusted: np.ndarray
    w0_original: np.ndarray
    generalized: GeneralizedExpert
    specialized: tuple[SpecializedExpert, ...]
    router: Router | None
    config: GseConfig
    top_k: int = field(default=0)

    def __post_init__(self):
        if self.top_k == 0:
            object.__setattr__(self, "top_k", self.config.layout[2])

    @property
    def shape(self) -> tuple[int, int]:
        return self.w0_original.shape

    @property
    def num_experts(self) -> int:
        return len(self.specialized)

    @property
    def scales(self) -> np.ndarray:
        return np.array([e.scale for e in self.specialized])

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """Specialized factors as ``(E, m, d)`` and ``(E, d, n)`` arrays."""
        return (
            np.stack([e.b for e in self.specialized]),
            np.stack([e.a for e in self.specialized]),
        )

    def params(self) -> dict[str, np.ndarray]:
        b_s, a_s = self.stacked()
        p = {"b_g": self.generalized.b, "a_g": self.generalized.a, "b_s": b_s, "a_s": a_s}
        if self.router is not None:
            p["w_z"] = self.router.w_z
        return p

    def with_params(self, p: dict[str, np.ndarray]) -> "GseLayer":
        gen = dataclasses.replace(self.generalized, b=p["b_g"], a=p["a_g"])
        specs = tuple(
            dataclasses.replace(e, b=p["b_s"][i], a=p["a_s"][i])
            for i, e in enumerate(self.specialized)
        )
        router = Router(p["w_z"]) if self.router is not None else None
        return dataclasses.replace(self, generalized=gen, specialized=specs, router=router)

    def trainable_count(self) -> int:
        return int(sum(v.size for v in self.params().values()))


# ---------------------------------------------------------------------------
# Initialization


def partition_spectrum(
    decomp: SpectralDecomposition, r_g: int, d: int, num_experts: int
) -> tuple[SpectralSegment, list[SpectralSegment]]:
    """Split the descending spectrum into the top ``r_g`` block and ``E`` rank-``d`` blocks."""
    needed = r_g + d * num_experts
    available = decomp.rank_slots
    if needed > available:
        raise ValueError(
            f"spectrum too short: r_g + d*E = {needed} singular values needed, {available} available"
        )

    def seg(lo: int, hi: int) -> SpectralSegment:
        return SpectralSegment(
            u=decomp.u[:, lo:hi], sigma=decomp.sigma[lo:hi], v=decomp.v[:, lo:hi], start=lo, stop=hi
        )

    gen = seg(0, r_g)
    specs = [seg(r_g + i * d, r_g + (i + 1) * d) for i in range(num_experts)]
    return gen, specs


def scaling_factors(specs, s_base: float) -> np.ndarray:
    """Trace-inverse scales ``s_base * C / Tr(Sigma_i)`` with C the mean trace.

    ``specs`` may be segments, experts, or plain trace values.
    """
    traces = np.array([getattr(s, "trace_sigma", s) for s in specs], dtype=np.float64)
    top = traces.max() if traces.size else 0.0
    if top <= 0 or np.any(traces <= 1e-12 * top):
        raise ValueError(f"degenerate spectral segment: traces {traces.tolist()}")
    c = traces.mean()
    return s_base * c / traces


def _factor_pair(seg: SpectralSegment, scale: float) -> tuple[np.ndarray, np.ndarray]:
    root = np.sqrt(seg.sigma)
    k = np.sqrt(1.0 / scale)
    # C order so products do not depend on how the SVD factors were laid out
    return np.ascontiguousarray(k * (seg.u * root)), np.ascontiguousarray(k * (root[:, None] * seg.v.T))


def init_generalized(seg: SpectralSegment, s_g: float) -> GeneralizedExpert:
    if not s_g > 0:
        raise ValueError(f"s_g must be positive, got {s_g}")
    b, a = _factor_pair(seg, s_g)
    return GeneralizedExpert(b=b, a=a, scale=float(s_g))


def init_specialized(
    seg: SpectralSegment,
    s_s: float,
    variant: Variant = Variant.FULL,
    rng: RngStream | None = None,
) -> SpecializedExpert:
    """Spectral factors, or Gaussian ``b`` with zero ``a`` under ``no_svd_init``."""
    if not s_s > 0:
        raise ValueError(f"s_s must be positive, got {s_s}")
    if Variant(variant) is Variant.NO_SVD_INIT:
        if rng is None:
            raise ValueError("no_svd_init needs an RngStream for the Gaussian factor")
        m, n = seg.u.shape[0], seg.v.shape[0]
        b = gaussian_matrix(m, seg.width, NO_SVD_INIT_STD, rng)
        a = np.zeros((seg.width, n))
    else:
        b, a = _factor_pair(seg, s_s)
    return SpecializedExpert(b=b, a=a, scale=float(s_s), trace_sigma=seg.trace_sigma)


def residual_shift(gen: GeneralizedExpert, specs) -> np.ndarray:
    """Expected initial offset: generalized product plus the mean specialized product."""
    mean_spec = sum(e.product() for e in specs) / len(specs)
    return gen.product() + mean_spec


def build_layer(w0, config: GseConfig) -> GseLayer:
    w0 = as_matrix(w0, "w0")
    r_g, num_experts, k = config.layout
    decomp = svd(w0)
    gen_seg, spec_segs = partition_spectrum(decomp, r_g, config.d, num_experts)

    if config.variant is Variant.NO_GRAD_SCALING:
        scales = np.full(num_experts, config.s_base)
    else:
        scales = scaling_factors(spec_segs, config.s_base)

    master = RngStream(config.seed)
    gen = init_generalized(gen_seg, config.s_g)
    specs = tuple(
        init_specialized(seg, s, config.variant, master.substream(_EXPERT_STREAM_BASE + i))
        for i, (seg, s) in enumerate(zip(spec_segs, scales))
    )
    w0_adjusted = w0 - residual_shift(gen, specs)

    router = None
    if config.routed:
        w_z = gaussian_matrix(num_experts, w0.shape[1], config.router_std, master.substream(_ROUTER_STREAM))
        router = Router(w_z)
    return GseLayer(
        w0_adjusted=w0_adjusted,
        w0_original=w0.copy(),
        generalized=gen,
        specialized=specs,
        router=router,
        config=config,
        top_k=k,
    )


# ---------------------------------------------------------------------------
# Routing and forward pass


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def route(router: Router, x: np.ndarray, k: int) -> RoutingResult:
    """Top-k routing with weights renormalized over the selected logits.

    Ties in the logits go to the lowest expert index.
    """
    x = np.asarray(x, dtype=np.float64)
    num_experts, n = router.w_z.shape
    if x.shape != (n,):
        raise ValueError(f"x must have shape ({n},), got {x.shape}")
    if not 1 <= k <= num_experts:
        raise ValueError(f"k must lie in [1, {num_experts}], got {k}")
    z = router.w_z @ x
    p = _softmax_rows(z)
    sel = np.sort(np.argsort(-z, kind="stable")[:k])
    w = np.zeros(num_experts)
    w[sel] = _softmax_rows(z[sel])
    return RoutingResult(logits=z, full_probs=p, selected=tuple(int(i) for i in sel), weights=w)


def route_batch(router: Router, x: np.ndarray, k: int) -> RoutingBatch:
    """Vectorized :func:`route` over the rows of ``x`` (shape ``(T, n)``)."""
    z = x @ router.w_z.T
    num_experts = z.shape[1]
    p = _softmax_rows(z)
    top = np.argsort(-z, axis=1, kind="stable")[:, :k]
    mask = np.zeros(z.shape, dtype=bool)
    np.put_along_axis(mask, top, True, axis=1)
    zm = np.where(mask, z, -np.inf)
    e = np.exp(zm - zm.max(axis=1, keepdims=True))
    w = e / e.sum(axis=1, keepdims=True)
    if k == num_experts:
        w = p.copy()
    return RoutingBatch(logits=z, full_probs=p, mask=mask, weights=w, k=k)


def _uniform_routing(num_experts: int, rows: int) -> RoutingBatch:
    u = np.full((rows, num_experts), 1.0 / num_experts)
    return RoutingBatch(
        logits=np.zeros((rows, num_experts)),
        full_probs=u,
        mask=np.ones((rows, num_experts), dtype=bool),
        weights=u.copy(),
        k=num_experts,
    )


def routing_for(layer: GseLayer, x: np.ndarray) -> RoutingBatch:
    x = np.atleast_2d(x)
    if layer.router is None:
        return _uniform_routing(layer.num_experts, x.shape[0])
    return route_batch(layer.router, x, layer.top_k)


def forward_batch(layer: GseLayer, x: np.ndarray) -> tuple[np.ndarray, RoutingBatch]:
    """Rows of ``x`` (``(T, n)``) mapped to rows of ``y`` (``(T, m)``), in factored form."""
    x = np.asarray(x, dtype=np.float64)
    m, n = layer.shape
    if x.ndim != 2 or x.shape[1] != n:
        raise ValueError(f"x must have shape (T, {n}), got {x.shape}")
    routing = routing_for(layer, x)
    gen = layer.generalized
    y = x @ layer.w0_adjusted.T + gen.scale * ((x @ gen.a.T) @ gen.b.T)
    b_s, a_s = layer.stacked()
    h = np.einsum("tn,edn->ted", x, a_s)
    coef = routing.weights * layer.scales
    y += np.einsum("ted,emd->tm", h * coef[:, :, None], b_s)
    return y, routing


def forward(layer: GseLayer, x: np.ndarray) -> tuple[np.ndarray, RoutingResult]:
    x = np.asarray(x, dtype=np.float64)
    n = layer.shape[1]
    if x.shape != (n,):
        raise ValueError(f"x must have shape ({n},), got {x.shape}")
    if layer.router is None:
        routing = _uniform_routing(layer.num_experts, 1).row(0)
    else:
        routing = route(layer.router, x, layer.top_k)
    gen = layer.generalized
    y = layer.w0_adjusted @ x + gen.scale * (gen.b @ (gen.a @ x))
    for i in routing.selected:
        e = layer.specialized[i]
        y = y + routing.weights[i] * e.scale * (e.b @ (e.a @ x))
    return y, routing


def equivalent_weight(
    layer: GseLayer, x: np.ndarray | None = None, weights: np.ndarray | None = None
) -> np.ndarray:
    """Materialized input-dependent weight; for checks and diagnostics.

    ``weights`` overrides the router's weights for the specialized experts.
    """
    if weights is None:
        if x is None:
            raise ValueError("need x or explicit routing weights")
        _, routing = forward(layer, x)
        weights = routing.weights
    w = layer.w0_adjusted + layer.generalized.product()
    for wi, e in zip(weights, layer.specialized):
        if wi != 0.0:
            w = w + wi * e.product()
    return w
