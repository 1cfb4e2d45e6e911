import dataclasses
import math

import numpy as np
import pytest

from gse.baselines import FullFineTune, build_adapter
from gse.core import GseConfig
from gse.harness.tasks import TaskSpec, make_task, oracle_predict
from gse.harness.training import TrainConfig, evaluate, train
from gse.losses import l1_loss
from gse.numkit import RngStream

SMALL = TaskSpec(m=16, n=16, num_clusters=3, samples_train=256, samples_val=128, seed=3)


@pytest.mark.parametrize(
    "kw", [dict(num_clusters=0), dict(cluster_rank=0), dict(noise_std=-1.0), dict(m=0), dict(samples_val=0)]
)
def test_taskspec_rejects_invalid(kw):
    with pytest.raises(ValueError):
        TaskSpec(**kw)


def test_make_task_deterministic():
    a, b = make_task(SMALL), make_task(SMALL)
    for x, y in [(a.w0, b.w0), (a.deltas, b.deltas), (a.train.inputs, b.train.inputs), (a.val.targets, b.val.targets)]:
        assert np.array_equal(x, y)
    c = make_task(dataclasses.replace(SMALL, seed=4))
    assert not np.array_equal(a.w0, c.w0)


def test_make_task_structure():
    task = make_task(SMALL)
    assert task.train.inputs.shape == (256, 16) and task.train.targets.shape == (256, 16)
    assert len(task.val) == 128
    w0_norm = np.linalg.norm(task.w0)
    for delta in task.deltas:
        assert math.isclose(np.linalg.norm(delta), 0.3 * w0_norm, rel_tol=1e-12)
        assert np.linalg.matrix_rank(delta) == SMALL.cluster_rank
    # spectral norm of order one
    assert 0.5 < np.linalg.norm(task.w0, 2) < 2.0
    assert set(np.unique(task.train.cluster_ids)) == {0, 1, 2}


def test_noiseless_targets_are_exact():
    task = make_task(dataclasses.replace(SMALL, noise_std=0.0))
    assert np.array_equal(oracle_predict(task, task.val), task.val.targets)


def test_oracle_reaches_noise_floor():
    spec = TaskSpec(num_clusters=7, seed=5)
    task = make_task(spec)
    loss, _ = l1_loss(oracle_predict(task, task.val), task.val.targets)
    # E|e| = sigma*sqrt(2/pi); sd(|e|) = sigma*sqrt(1 - 2/pi); allow 4 standard errors
    count = task.val.targets.size
    floor = spec.noise_std * math.sqrt(2 / math.pi)
    se = spec.noise_std * math.sqrt(1 - 2 / math.pi) / math.sqrt(count)
    assert loss <= floor + 4 * se


def _gse(task, **kw):
    cfg = GseConfig(d=1, num_experts=4, **kw)
    return build_adapter("gse", task.w0, cfg, RngStream(0))


def test_train_zero_steps():
    task = make_task(SMALL)
    ad = _gse(task)
    _, rec = train(ad, task, TrainConfig(steps=0))
    assert rec.steps == []
    assert rec.initial_val_loss == rec.final_val_loss == evaluate(ad, task.val).loss
    assert rec.schema == "gse-run/1"


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_train_zero_lr_keeps_parameters(optimizer):
    task = make_task(SMALL)
    ad = _gse(task)
    cfg = TrainConfig(steps=5, optimizer=optimizer, lr=0.0, lr_dense=0.0)
    trained, rec = train(ad, task, cfg)
    for k, v in ad.params().items():
        assert np.array_equal(trained.params()[k], v)
    assert rec.final_val_loss == rec.initial_val_loss
    # per-step losses are those of the frozen adapter on each sampled batch
    gen = RngStream(cfg.seed, 21).generator()
    for s in rec.steps:
        idx = gen.integers(0, len(task.train), size=cfg.batch_size)
        pred, _ = ad.forward_batch(task.train.inputs[idx])
        assert s.task_loss == l1_loss(pred, task.train.targets[idx])[0]


def test_train_records_per_step_metrics():
    task = make_task(SMALL)
    _, rec = train(_gse(task), task, TrainConfig(steps=7, batch_size=8))
    assert [s.step for s in rec.steps] == list(range(7))
    for s in rec.steps:
        assert len(s.expert_freq) == 4
        assert math.isclose(sum(s.expert_freq), 2.0, rel_tol=1e-12)  # k per token
        assert abs(s.total_loss - (s.task_loss + 0.01 * s.balance_loss_sum)) <= 1e-12
    assert rec.trainable_params == _gse(task).trainable_count()


def test_train_deterministic():
    task = make_task(SMALL)
    _, r1 = train(_gse(task), task, TrainConfig(steps=20))
    _, r2 = train(_gse(task), task, TrainConfig(steps=20))
    assert r1.steps == r2.steps and r1.final_val_loss == r2.final_val_loss


def test_train_improves_on_clustered_task():
    task = make_task(SMALL)
    _, rec = train(_gse(task), task, TrainConfig(steps=300))
    assert rec.final_val_loss < rec.initial_val_loss


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_recorded():
    task = make_task(SMALL)
    # the L1 gradient is bounded, so force overflow through the weights instead
    ad = FullFineTune(np.full(task.w0.shape, 1e308))
    _, rec = train(ad, task, TrainConfig(steps=50))
    assert rec.status == "diverged"
    assert rec.failed_step == 0 and rec.steps == []
    assert "non-finite" in rec.error


def test_lora_fits_realizable_task():
    task = make_task(TaskSpec(num_clusters=1, noise_std=0.0, seed=1))
    ad = build_adapter("lora", task.w0, GseConfig(), RngStream(1))
    _, rec = train(ad, task, TrainConfig())
    assert rec.final_val_loss < 0.01 * rec.initial_val_loss


@pytest.mark.xfail(
    strict=True,
    reason=(
        "the backbone adjustment removes the mean of all specialist products "
        "(rank r_g + E*d), while each token can re-add only rank r_g + k*d; "
        "with E=7, k=2 the residual cannot be fitted, so the ratio plateaus near 0.3"
    ),
)
def test_gse_fits_realizable_task():
    task = make_task(TaskSpec(num_clusters=1, noise_std=0.0, seed=1))
    ad = build_adapter("gse", task.w0, GseConfig(seed=1), RngStream(1))
    _, rec = train(ad, task, TrainConfig())
    assert rec.final_val_loss < 0.01 * rec.initial_val_loss


def test_evaluate_reports_frequencies():
    task = make_task(SMALL)
    ev = evaluate(_gse(task), task.val)
    assert len(ev.freq) == 4 and 0 < ev.entropy <= math.log(4)
    ev_lora = evaluate(build_adapter("lora", task.w0, GseConfig(d=1, num_experts=4), RngStream(0)), task.val)
    assert ev_lora.freq == () and math.isnan(ev_lora.entropy)
