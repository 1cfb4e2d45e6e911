"""Budget-matched comparisons over paired trial seeds.

A *kind* is one of ``gse``, ``lora``, ``pissa_style``, ``full_ft``, a GSE
ablation written ``gse/<variant>`` (for example ``gse/no_svd_init``), or
``gse/no_aux`` for GSE trained without the balance term. Trial ``t`` uses
task seed ``task.seed + t``, layer seed ``gse.seed + t`` and batch seed
``train.seed + t`` for every kind, so kinds are compared on identical data.
"""

from __future__ import annotations

import dataclasses
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from gse.baselines import KINDS, build_adapter, match_budget
from gse.core import Variant, equivalent_weight
from gse.harness.config import HarnessConfig
from gse.harness.tasks import make_task
from gse.harness.training import RunRecord, train
from gse.numkit import RngStream

__all__ = ["ComparisonReport", "KindSummary", "paired_wins", "parse_kind", "run_comparison", "run_trial"]

SCHEMA_VERSION = "gse-compare/1"
_BASELINE_INIT_STREAM = 5
REFERENCE_KIND = "gse"


def parse_kind(kind: str) -> tuple[str, dict]:
    """Split ``kind`` into a baseline name and GseConfig overrides."""
    base, _, tag = kind.partition("/")
    if base not in KINDS:
        raise ValueError(f"unknown adapter kind {kind!r}; expected one of {KINDS} or gse/<variant>")
    if not tag:
        return base, {}
    if base != "gse":
        raise ValueError(f"only gse takes a variant suffix, got {kind!r}")
    if tag == "no_aux":
        return base, {"alpha": 0.0}
    try:
        return base, {"variant": Variant(tag)}
    except ValueError:
        names = [v.value for v in Variant] + ["no_aux"]
        raise ValueError(f"unknown gse variant {tag!r}; expected one of {names}") from None


def _trial_configs(cfg: HarnessConfig, kind: str, trial: int):
    base, overrides = parse_kind(kind)
    task_spec = dataclasses.replace(cfg.task, seed=cfg.task.seed + trial)
    gse_cfg = dataclasses.replace(cfg.gse, seed=cfg.gse.seed + trial, **overrides)
    train_cfg = dataclasses.replace(cfg.train, seed=cfg.train.seed + trial)
    return base, task_spec, gse_cfg, train_cfg


def run_trial(cfg: HarnessConfig, kind: str, trial: int) -> RunRecord:
    """One training run; failures come back as records with ``status="failed"``."""
    base, task_spec, gse_cfg, train_cfg = _trial_configs(cfg, kind, trial)
    extra = {"kind": kind, "trial": trial, "gse": gse_cfg.to_dict(), "harness": cfg.to_dict()}
    try:
        task = make_task(task_spec)
        rng = RngStream(gse_cfg.seed, _BASELINE_INIT_STREAM)
        adapter = build_adapter(base, task.w0, gse_cfg, rng, cfg.compare.lora_scale)
        attach = {}
        if base == "gse":
            w_eq = equivalent_weight(adapter.layer, weights=np.full(adapter.layer.num_experts, 1.0 / adapter.layer.num_experts))
            attach["init_merge_max_entry_error"] = float(np.abs(w_eq - task.w0).max())
        _, record = train(adapter, task, train_cfg, extra)
        record.verification.update(attach)
    except Exception as exc:  # isolate-and-continue
        record = RunRecord(
            config={"train": train_cfg.to_dict(), "task": task_spec.to_dict(), **extra},
            seeds={"task": task_spec.seed, "train": train_cfg.seed},
            trainable_params=0,
            num_experts=0,
            status="failed",
            error=f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}",
        )
    record.seeds["layer"] = gse_cfg.seed
    return record


@dataclass
class KindSummary:
    kind: str
    param_count: int
    budget_target: int
    rank: int
    within_budget: bool
    budget_exempt: bool
    final_losses: list[float | None]
    final_entropies: list[float | None]
    median: float | None
    iqr: float | None
    wins_vs_reference: int | None  # trials where the reference kind had lower loss
    failed_trials: list[int]


@dataclass
class ComparisonReport:
    kinds: list[str]
    trials: int
    seeds: dict
    config: dict
    summaries: dict[str, KindSummary] = field(default_factory=dict)
    records: dict[str, list[RunRecord]] = field(default_factory=dict)
    schema: str = SCHEMA_VERSION

    @property
    def budget_ok(self) -> bool:
        return all(s.within_budget or s.budget_exempt for s in self.summaries.values())

    @property
    def failed(self) -> list[tuple[str, int]]:
        return [(k, t) for k, s in self.summaries.items() for t in s.failed_trials]

    def to_dict(self) -> dict:
        return {
            "schema": self.schema,
            "kinds": self.kinds,
            "trials": self.trials,
            "seeds": self.seeds,
            "reference_kind": REFERENCE_KIND,
            "budget_ok": self.budget_ok,
            "failed_trials": [{"kind": k, "trial": t} for k, t in self.failed],
            "summaries": {k: dataclasses.asdict(s) for k, s in self.summaries.items()},
            "config": self.config,
        }


def _finite_or_none(v: float) -> float | None:
    return float(v) if np.isfinite(v) else None


def _summarize(kind: str, cfg: HarnessConfig, records: list[RunRecord], ref: list[RunRecord] | None):
    base, overrides = parse_kind(kind)
    shape = (cfg.task.m, cfg.task.n)
    spec = match_budget(shape, dataclasses.replace(cfg.gse, **overrides))
    reference = match_budget(shape, cfg.gse)["gse"].param_count
    adapter_spec = spec[base]
    count = adapter_spec.param_count
    within = abs(count - reference) <= 0.03 * reference
    losses = [_finite_or_none(r.final_val_loss) if r.status == "ok" else None for r in records]
    entropies = [_finite_or_none(r.final_val_entropy) if r.status == "ok" else None for r in records]
    ok = np.array([v for v in losses if v is not None])
    median = float(np.median(ok)) if ok.size else None
    iqr = float(np.subtract(*np.percentile(ok, [75, 25]))) if ok.size else None
    wins = None
    if ref is not None and kind != REFERENCE_KIND:
        wins = 0
        for r_ref, r in zip(ref, records):
            if r_ref.status == "ok" and r.status == "ok" and r_ref.final_val_loss < r.final_val_loss:
                wins += 1
    # records carry the realized count; it must equal the analytic one
    for r in records:
        if r.status == "ok" and r.trainable_params != count:
            raise AssertionError(f"{kind}: trainable count {r.trainable_params} != budget count {count}")
    return KindSummary(
        kind=kind,
        param_count=count,
        budget_target=reference,
        rank=adapter_spec.rank,
        within_budget=bool(within),
        budget_exempt=base == "full_ft",
        final_losses=losses,
        final_entropies=entropies,
        median=median,
        iqr=iqr,
        wins_vs_reference=wins,
        failed_trials=[r.config.get("trial", i) for i, r in enumerate(records) if r.status != "ok"],
    )


def run_comparison(cfg: HarnessConfig, kinds=None, trials: int | None = None, workers: int | None = None):
    kinds = list(kinds or cfg.compare.kinds)
    trials = cfg.compare.trials if trials is None else trials
    workers = cfg.compare.workers if workers is None else workers
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    for k in kinds:
        parse_kind(k)
    jobs = [(k, t) for k in kinds for t in range(trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_trial, cfg, k, t) for k, t in jobs]
            results = [f.result() for f in futures]
    else:
        results = [run_trial(cfg, k, t) for k, t in jobs]

    records = {k: [] for k in kinds}
    for (k, _), rec in zip(jobs, results):
        records[k].append(rec)
    report = ComparisonReport(
        kinds=kinds,
        trials=trials,
        seeds={"task": cfg.task.seed, "gse": cfg.gse.seed, "train": cfg.train.seed},
        config=cfg.to_dict(),
        records=records,
    )
    ref = records.get(REFERENCE_KIND)
    for k in kinds:
        report.summaries[k] = _summarize(k, cfg, records[k], ref)
    return report


def paired_wins(a: list[float | None], b: list[float | None], higher: bool = False) -> int:
    """Trials where ``a`` beats ``b`` (lower, or higher if ``higher``); skips missing."""
    wins = 0
    for x, y in zip(a, b):
        if x is None or y is None:
            continue
        wins += (x > y) if higher else (x < y)
    return wins
