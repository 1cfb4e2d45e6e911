"""Closed-form gradients for GSE layers, a central-difference checker, and
SGD / Adam updates with per-group learning rates.

For a sample with upstream gradient ``g = dL/dW_eq`` the localized factor
gradients of a routed expert are ``w * s * B.T @ g`` and ``w * s * g @ A.T``;
the generalized expert uses the same expressions with ``w = 1``. The router
receives gradient only through the softmax renormalized over the selected
experts; the discrete top-k choice itself is treated as constant.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from gse.core import GseLayer, RoutingBatch, RoutingResult, forward, forward_batch

__all__ = [
    "FdReport",
    "GradientBundle",
    "OptimState",
    "apply_step",
    "backward",
    "expert_gradients",
    "fd_check",
    "layer_gradients",
    "router_gradients",
    "upstream_gradient",
]

PARAM_GROUPS = {"A_s": "a_s", "B_s": "b_s", "A_g": "a_g", "B_g": "b_g", "W_z": "w_z"}


@dataclass
class GradientBundle:
    g_upstream: np.ndarray
    g_a_spec: np.ndarray
    g_b_spec: np.ndarray
    g_a_gen: np.ndarray
    g_b_gen: np.ndarray
    g_router: np.ndarray | None

    def as_dict(self) -> dict[str, np.ndarray]:
        d = {"a_s": self.g_a_spec, "b_s": self.g_b_spec, "a_g": self.g_a_gen, "b_g": self.g_b_gen}
        if self.g_router is not None:
            d["w_z"] = self.g_router
        return d


def upstream_gradient(dl_dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``dl_dy x^T``; for 2-D inputs (rows are samples) the per-sample sum."""
    dl_dy = np.asarray(dl_dy, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if dl_dy.ndim == 1 and x.ndim == 1:
        return np.outer(dl_dy, x)
    if dl_dy.ndim == 2 and x.ndim == 2 and dl_dy.shape[0] == x.shape[0]:
        return dl_dy.T @ x
    raise ValueError(f"incompatible shapes {dl_dy.shape} and {x.shape}")


def expert_gradients(g: np.ndarray, w_i: float, expert) -> tuple[np.ndarray, np.ndarray]:
    """Localized ``(g_A, g_B)`` for one expert (anything with ``b``, ``a``, ``scale``)."""
    if g.shape != (expert.b.shape[0], expert.a.shape[1]):
        raise ValueError(f"g has shape {g.shape}, expert maps to {(expert.b.shape[0], expert.a.shape[1])}")
    c = w_i * expert.scale
    return c * (expert.b.T @ g), c * (g @ expert.a.T)


def _softmax_backward(w: np.ndarray, dw: np.ndarray) -> np.ndarray:
    # d/dz of a softmax-weighted quantity; rows are tokens
    return w * (dw - np.sum(w * dw, axis=-1, keepdims=True))


def router_gradients(g: np.ndarray, x: np.ndarray, routing: RoutingResult, specs) -> np.ndarray:
    num_experts = len(specs)
    sel = list(routing.selected)
    dz = np.zeros(num_experts)
    if len(sel) > 1:
        dw = np.array([specs[j].scale * np.sum((specs[j].b.T @ g) * specs[j].a) for j in sel])
        dz[sel] = _softmax_backward(routing.weights[sel], dw)
    return np.outer(dz, x)


def layer_gradients(layer: GseLayer, x: np.ndarray, dl_dy: np.ndarray) -> GradientBundle:
    """Single-sample gradients, built expert by expert from the upstream ``g``."""
    _, routing = forward(layer, x)
    g = upstream_gradient(dl_dy, x)
    ga_g, gb_g = expert_gradients(g, 1.0, layer.generalized)
    per_expert = [expert_gradients(g, routing.weights[i], e) for i, e in enumerate(layer.specialized)]
    g_router = None
    if layer.router is not None:
        g_router = router_gradients(g, x, routing, layer.specialized)
    return GradientBundle(
        g_upstream=g,
        g_a_spec=np.stack([p[0] for p in per_expert]),
        g_b_spec=np.stack([p[1] for p in per_expert]),
        g_a_gen=ga_g,
        g_b_gen=gb_g,
        g_router=g_router,
    )


def backward(
    layer: GseLayer,
    x: np.ndarray,
    dy: np.ndarray,
    routing: RoutingBatch,
    dlogits_extra: np.ndarray | None = None,
) -> GradientBundle:
    """Batch gradients summed over rows of ``x`` / ``dy``.

    ``dlogits_extra`` is an additional ``(T, E)`` gradient on the router logits,
    e.g. from the load-balancing term.
    """
    gen = layer.generalized
    b_s, a_s = layer.stacked()
    scales = layer.scales
    coef = routing.weights * scales  # (T, E)

    hg = x @ gen.a.T  # (T, r_g)
    ug = dy @ gen.b  # (T, r_g)
    g_b_gen = gen.scale * (dy.T @ hg)
    g_a_gen = gen.scale * (ug.T @ x)

    h = np.einsum("tn,edn->ted", x, a_s)  # A_i x_t
    u = np.einsum("tm,emd->ted", dy, b_s)  # B_i^T dy_t
    g_b_spec = np.einsum("tm,ted->emd", dy, h * coef[:, :, None])
    g_a_spec = np.einsum("ted,tn->edn", u * coef[:, :, None], x)

    g_router = None
    if layer.router is not None:
        dz = np.zeros_like(routing.logits)
        if routing.k > 1:
            dw = scales * np.einsum("ted,ted->te", u, h)
            dz = _softmax_backward(routing.weights, np.where(routing.mask, dw, 0.0))
        if dlogits_extra is not None:
            dz = dz + dlogits_extra
        g_router = dz.T @ x
    return GradientBundle(
        g_upstream=dy.T @ x,
        g_a_spec=g_a_spec,
        g_b_spec=g_b_spec,
        g_a_gen=g_a_gen,
        g_b_gen=g_b_gen,
        g_router=g_router,
    )


# ---------------------------------------------------------------------------
# Finite-difference check


@dataclass
class FdReport:
    """Max relative error per parameter group; ``None`` marks an unprobeable group."""

    errors: dict[str, float | None]
    probed: dict[str, int]
    skipped: dict[str, int]

    @property
    def worst(self) -> float:
        vals = [v for v in self.errors.values() if v is not None]
        return max(vals) if vals else 0.0

    def status(self, group: str) -> str:
        if self.errors[group] is None:
            return "unprobeable at this x"
        return f"{self.errors[group]:.3e}"


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale < 1e-12:
        return float(np.abs(analytic - numeric).max(initial=0.0))
    return float(np.abs(analytic - numeric).max() / scale)


def fd_check(layer: GseLayer, x: np.ndarray, target: np.ndarray, eps: float = 1e-6) -> FdReport:
    """Compare analytic gradients of ``0.5 * ||forward(x) - target||^2`` to
    central differences, one scalar parameter at a time.

    Router entries whose +/- perturbation changes the selected set are skipped.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-8, 1e-4], got {eps}")
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    y, routing = forward(layer, x)
    analytic = layer_gradients(layer, x, y - target).as_dict()
    base = layer.params()

    def evaluate(p):
        yy, rr = forward(layer.with_params(p), x)
        return 0.5 * float(np.sum((yy - target) ** 2)), rr.selected

    errors, probed, skipped = {}, {}, {}
    for group, key in PARAM_GROUPS.items():
        if key not in base:
            continue
        arr = base[key]
        num = np.zeros_like(arr)
        ok = np.zeros(arr.shape, dtype=bool)
        for idx in np.ndindex(arr.shape):
            vals = []
            for sign in (1.0, -1.0):
                p = dict(base)
                q = arr.copy()
                q[idx] += sign * eps
                p[key] = q
                vals.append(evaluate(p))
            if key == "w_z" and any(sel != routing.selected for _, sel in vals):
                continue
            num[idx] = (vals[0][0] - vals[1][0]) / (2 * eps)
            ok[idx] = True
        probed[group] = int(ok.sum())
        skipped[group] = int(ok.size - ok.sum())
        if ok.size and not ok.any():
            errors[group] = None
        else:
            errors[group] = _rel_err(analytic[key][ok], num[ok])
    return FdReport(errors=errors, probed=probed, skipped=skipped)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class OptimState:
    """First-order optimizer state.

    ``lrs`` maps parameter-group names to learning rates; ``groups`` maps each
    parameter name to its group (default ``"adapter"``). ``schedule`` is
    ``"constant"`` or ``"cosine"`` over ``total_steps``.
    """

    kind: str = "adam"
    lrs: dict[str, float] = field(default_factory=lambda: {"adapter": 1e-3, "dense": 1e-3})
    groups: dict[str, str] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "constant"
    total_steps: int = 0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def lr_for(self, name: str) -> float:
        lr = self.lrs[self.groups.get(name, "adapter")]
        if self.schedule == "cosine" and self.total_steps > 0:
            frac = min(self.step, self.total_steps) / self.total_steps
            lr *= 0.5 * (1.0 + math.cos(math.pi * frac))
        return lr


def apply_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], opt: OptimState
) -> tuple[dict[str, np.ndarray], OptimState]:
    """One update; returns new parameter arrays and a new state, inputs untouched."""
    new_params = dict(params)
    new_m, new_v = dict(opt.m), dict(opt.v)
    t = opt.step + 1
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        lr = opt.lr_for(name)
        if opt.kind == "sgd":
            new_params[name] = p - lr * g
            continue
        m = opt.beta1 * opt.m.get(name, np.zeros_like(p)) + (1 - opt.beta1) * g
        v = opt.beta2 * opt.v.get(name, np.zeros_like(p)) + (1 - opt.beta2) * g * g
        m_hat = m / (1 - opt.beta1**t)
        v_hat = v / (1 - opt.beta2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + opt.eps)
        new_m[name], new_v[name] = m, v
    return new_params, dataclasses.replace(opt, step=t, m=new_m, v=new_v)
