import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gse.autograd import OptimState, apply_step
from gse.baselines import (
    BUDGET_TOLERANCE,
    KINDS,
    build_adapter,
    build_full_ft,
    build_gse,
    build_lora,
    build_pissa_style,
    gse_param_count,
    match_budget,
)
from gse.core import GseConfig, equivalent_weight
from gse.harness.oracles import central_difference
from gse.numkit import RngStream, svd

from conftest import seeded


def _half_sq(adapter, x, target):
    y, _ = adapter.forward_batch(x)
    return 0.5 * float(np.sum((y - target) ** 2))


def test_lora_init_forward_is_base():
    w0 = seeded(10, 8, 1)
    ad = build_lora(w0, 3, 2.0, RngStream(2))
    x = RngStream(3).generator().standard_normal((5, 8))
    assert np.array_equal(ad.forward_batch(x)[0], x @ w0.T)
    assert np.array_equal(ad.backbone, w0)
    assert abs(ad.b.std() - 0.02) < 0.01 and not ad.a.any()


def test_lora_param_count_rank16():
    assert build_lora(seeded(64, 64, 4), 16).trainable_count() == 2048


def test_lora_gradients_match_fd():
    w0 = seeded(7, 6, 5)
    ad = build_lora(w0, 2, 1.5, RngStream(6))
    gen = RngStream(7).generator()
    ad = ad.with_params({"b": ad.b + gen.standard_normal(ad.b.shape), "a": gen.standard_normal(ad.a.shape)})
    x, target = gen.standard_normal((4, 6)), gen.standard_normal((4, 7))
    dy = ad.forward_batch(x)[0] - target
    grads = ad.backward(x, dy)
    for key in ("b", "a"):
        def f(v, key=key):
            return _half_sq(ad.with_params({**ad.params(), key: v}), x, target)

        fd = central_difference(f, ad.params()[key], 1e-6)
        assert np.abs(grads[key] - fd).max() <= 1e-6 * np.abs(fd).max()


def test_full_ft_gradient_matches_fd():
    ad = build_full_ft(seeded(5, 4, 8))
    gen = RngStream(9).generator()
    x, target = gen.standard_normal((3, 4)), gen.standard_normal((3, 5))
    g = ad.backward(x, ad.forward_batch(x)[0] - target)["w"]
    fd = central_difference(lambda w: _half_sq(ad.with_params({"w": w}), x, target), ad.w, 1e-6)
    assert np.abs(g - fd).max() <= 1e-6 * np.abs(fd).max()
    assert ad.param_groups() == {"w": "dense"}


@pytest.mark.parametrize("builder", [build_lora, build_pissa_style])
def test_rank_too_large(builder):
    with pytest.raises(ValueError, match="rank"):
        builder(seeded(6, 4, 1), 5)


@given(seed=st.integers(0, 2**32), rank=st.integers(1, 8))
def test_pissa_init_equals_base(seed, rank):
    w0 = seeded(9, 8, seed)
    ad = build_pissa_style(w0, rank)
    assert np.abs(ad.equivalent_weight() - w0).max() <= 1e-12 * max(1.0, np.abs(w0).max())


def test_pissa_diagonal_residual(diag4321):
    ad = build_pissa_style(diag4321, 2)
    np.testing.assert_allclose(ad.backbone, np.diag([0.0, 0.0, 2.0, 1.0]), atol=1e-15)


def test_pissa_step_stays_in_top_subspace_to_first_order():
    w0 = seeded(12, 10, 10)
    rank, lr = 3, 1e-4
    ad = build_pissa_style(w0, rank)
    dec = svd(w0)
    pu = np.eye(12) - dec.u[:, :rank] @ dec.u[:, :rank].T
    pv = np.eye(10) - dec.v[:, :rank] @ dec.v[:, :rank].T
    gen = RngStream(11).generator()
    x, target = gen.standard_normal((16, 10)), gen.standard_normal((16, 12))
    grads = ad.backward(x, ad.forward_batch(x)[0] - target)
    new, _ = apply_step(ad.params(), grads, OptimState(kind="sgd", lrs={"adapter": lr}))
    delta = ad.with_params(new).equivalent_weight() - ad.equivalent_weight()
    # dW = -lr (g_B A + B g_A) + lr^2 g_B g_A; the first-order part lies in the
    # top column or row span, so only the second-order term survives projection
    residual = pu @ delta @ pv
    predicted = lr**2 * (pu @ grads["b"] @ grads["a"] @ pv)
    assert np.abs(residual - predicted).max() <= 1e-12 * max(np.abs(delta).max(), 1e-300)
    assert np.linalg.norm(residual) <= 1e-2 * np.linalg.norm(delta)


def test_match_budget_reference():
    specs = match_budget((64, 64), GseConfig())
    assert specs["gse"].param_count == 2496
    assert gse_param_count((64, 64), GseConfig()) == (2 + 14) * 128 + 7 * 64
    assert specs["lora"].rank == 19 and specs["lora"].param_count == 2432
    assert specs["lora"].within_budget
    assert abs(specs["lora"].rel_gap) <= BUDGET_TOLERANCE
    assert specs["pissa_style"].rank == specs["lora"].rank
    assert specs["full_ft"].param_count == 4096 and not specs["full_ft"].within_budget


def test_match_budget_tie_goes_to_smaller_rank():
    # 2496 sits exactly between 19*128 and 20*128
    assert abs(19 * 128 - 2496) == abs(20 * 128 - 2496)
    assert match_budget((64, 64), GseConfig())["lora"].rank == 19


def test_match_budget_reports_closest_when_infeasible():
    # a 16-wide layer: GSE count 16*(m+n) + 7*n exceeds any rank <= min(m, n) budget
    specs = match_budget((200, 16), GseConfig())
    assert specs["lora"].rank == 16
    assert not specs["lora"].within_budget


@pytest.mark.parametrize("kind", KINDS)
def test_built_counts_match_budget(kind):
    w0 = seeded(64, 64, 12)
    cfg = GseConfig()
    ad = build_adapter(kind, w0, cfg, RngStream(13))
    assert ad.trainable_count() == match_budget(w0.shape, cfg)[kind].param_count


@pytest.mark.parametrize("kind", ["lora", "pissa_style", "full_ft"])
def test_baselines_exact_at_init(kind):
    w0 = seeded(20, 16, 14)
    ad = build_adapter(kind, w0, GseConfig(), RngStream(15))
    x = RngStream(16).generator().standard_normal((8, 16))
    assert np.abs(ad.forward_batch(x)[0] - x @ w0.T).max() <= 1e-12 * np.abs(x @ w0.T).max()


def test_gse_adapter_balance_gradient_only_touches_router():
    ad = build_gse(seeded(16, 16, 17), GseConfig())
    x = RngStream(18).generator().standard_normal((10, 16))
    _, routing = ad.forward_batch(x)
    dy = np.zeros((10, 16))
    g0 = ad.backward(x, dy, routing, 0.0)
    g1 = ad.backward(x, dy, routing, 0.5)
    for k in ("a_s", "b_s", "a_g", "b_g"):
        assert np.array_equal(g0[k], g1[k])
    assert not g0["w_z"].any() and g1["w_z"].any()


def test_gse_adapter_uniform_weight_merge():
    w0 = seeded(16, 16, 19)
    ad = build_gse(w0, GseConfig())
    assert np.abs(equivalent_weight(ad.layer, weights=np.full(7, 1 / 7)) - w0).max() <= 1e-12


def test_build_adapter_unknown_kind():
    with pytest.raises(ValueError):
        build_adapter("dora", seeded(8, 8, 1), GseConfig(d=1, num_experts=3), RngStream(0))
