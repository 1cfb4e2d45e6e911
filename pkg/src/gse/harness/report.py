"""Report files for runs and comparisons.

A run directory holds:

* ``run.json``: everything needed to re-render the other files
  (``gse report --from <dir>``);
* ``metrics.csv`` (single run) or ``metrics/<kind>__trial<t>.csv``: one row
  per step, columns ``step,task_loss,balance_loss_sum,total_loss`` then
  ``expert_freq_0..E-1``. The first line is a ``#`` comment carrying the
  schema tag and seeds. Floats use 17 significant digits;
* ``summary.json``: config echo and headline numbers;
* ``routing.csv``: final validation selection frequency per expert;
* ``timing.json``: wall-clock seconds. This is the only file that varies
  between identical reruns.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from pathlib import Path

from gse.harness.compare import ComparisonReport, KindSummary
from gse.harness.training import RunRecord, StepMetrics

__all__ = [
    "METRICS_SCHEMA",
    "load_run_dir",
    "metrics_csv_text",
    "parse_metrics_csv",
    "record_from_dict",
    "record_to_dict",
    "render",
    "write_comparison",
    "write_run",
]

METRICS_SCHEMA = "gse-metrics/1"
ROUTING_SCHEMA = "gse-routing/1"
SUMMARY_SCHEMA = "gse-summary/1"
RUN_FILE_SCHEMA = "gse-rundir/1"
_BASE_COLUMNS = ["step", "task_loss", "balance_loss_sum", "total_loss"]


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def _seed_tag(seeds: dict) -> str:
    return ",".join(f"{k}:{seeds[k]}" for k in sorted(seeds))


def metrics_csv_text(steps, num_experts: int, seeds: dict) -> str:
    buf = io.StringIO()
    buf.write(f"# {METRICS_SCHEMA} seeds={_seed_tag(seeds)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_BASE_COLUMNS + [f"expert_freq_{i}" for i in range(num_experts)])
    for s in steps:
        if len(s.expert_freq) != num_experts:
            raise ValueError(f"step {s.step}: {len(s.expert_freq)} frequencies for {num_experts} experts")
        row = [str(s.step), _fmt(s.task_loss), _fmt(s.balance_loss_sum), _fmt(s.total_loss)]
        writer.writerow(row + [_fmt(f) for f in s.expert_freq])
    return buf.getvalue()


def parse_metrics_csv(text: str) -> tuple[list[StepMetrics], dict]:
    """Inverse of :func:`metrics_csv_text`; returns the steps and header metadata."""
    lines = text.splitlines()
    if not lines or not lines[0].startswith(f"# {METRICS_SCHEMA}"):
        raise ValueError(f"missing {METRICS_SCHEMA} header line")
    seeds = {}
    for token in lines[0].split():
        if token.startswith("seeds="):
            for pair in filter(None, token[len("seeds=") :].split(",")):
                k, _, v = pair.partition(":")
                seeds[k] = int(v)
    reader = csv.reader(lines[1:])
    header = next(reader)
    if header[:4] != _BASE_COLUMNS:
        raise ValueError(f"unexpected columns {header}")
    num_experts = len(header) - 4
    steps = [
        StepMetrics(int(r[0]), float(r[1]), float(r[2]), float(r[3]), tuple(float(v) for v in r[4:]))
        for r in reader
    ]
    return steps, {"seeds": seeds, "num_experts": num_experts}


def _clean(obj):
    """JSON-safe copy: NaN and inf become None, tuples become lists."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _nan(v):
    return float("nan") if v is None else v


def record_to_dict(rec: RunRecord, include_timing: bool = False) -> dict:
    d = dataclasses.asdict(rec)
    if not include_timing:
        d.pop("wall_clock")
    return _clean(d)


def record_from_dict(d: dict) -> RunRecord:
    d = dict(d)
    d["steps"] = [
        StepMetrics(s["step"], s["task_loss"], s["balance_loss_sum"], s["total_loss"], tuple(s["expert_freq"]))
        for s in d["steps"]
    ]
    for key in ("initial_val_loss", "final_val_loss", "final_val_entropy"):
        d[key] = _nan(d.get(key))
    d["final_val_freq"] = tuple(d.get("final_val_freq", ()))
    d.setdefault("wall_clock", 0.0)
    return RunRecord(**d)


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=False) + "\n")


def _routing_csv(rows, seeds: dict) -> str:
    """``rows`` is a list of ``(label, freqs)``."""
    buf = io.StringIO()
    buf.write(f"# {ROUTING_SCHEMA} seeds={_seed_tag(seeds)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    width = max((len(f) for _, f in rows), default=0)
    writer.writerow(["run"] + [f"expert_freq_{i}" for i in range(width)])
    for label, freqs in rows:
        writer.writerow([label] + [_fmt(f) for f in freqs])
    return buf.getvalue()


def _run_summary(rec: RunRecord) -> dict:
    return {
        "schema": SUMMARY_SCHEMA,
        "record_schema": rec.schema,
        "seeds": rec.seeds,
        "status": rec.status,
        "failed_step": rec.failed_step,
        "error": rec.error,
        "trainable_params": rec.trainable_params,
        "num_experts": rec.num_experts,
        "steps_completed": len(rec.steps),
        "initial_val_loss": rec.initial_val_loss,
        "final_val_loss": rec.final_val_loss,
        "final_val_entropy": rec.final_val_entropy,
        "final_val_freq": list(rec.final_val_freq),
        "verification": rec.verification,
        "config": rec.config,
    }


def write_run(out_dir, rec: RunRecord) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "run.json", {"schema": RUN_FILE_SCHEMA, "type": "run", "record": record_to_dict(rec)})
    _render_run(out, rec)
    _dump(out / "timing.json", {"schema": RUN_FILE_SCHEMA, "wall_clock_seconds": rec.wall_clock})
    return out


def _render_run(out: Path, rec: RunRecord) -> None:
    (out / "metrics.csv").write_text(metrics_csv_text(rec.steps, rec.num_experts, rec.seeds))
    _dump(out / "summary.json", _run_summary(rec))
    if rec.final_val_freq:
        (out / "routing.csv").write_text(_routing_csv([("final_val", rec.final_val_freq)], rec.seeds))


def _trial_label(kind: str, trial: int) -> str:
    return f"{kind.replace('/', '-')}__trial{trial}"


def write_comparison(out_dir, report: ComparisonReport) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema": RUN_FILE_SCHEMA,
        "type": "comparison",
        "report": report.to_dict(),
        "records": {k: [record_to_dict(r) for r in recs] for k, recs in report.records.items()},
    }
    _dump(out / "run.json", payload)
    _render_comparison(out, report)
    timing = {
        _trial_label(k, t): r.wall_clock for k, recs in report.records.items() for t, r in enumerate(recs)
    }
    _dump(out / "timing.json", {"schema": RUN_FILE_SCHEMA, "wall_clock_seconds": timing})
    return out


def _render_comparison(out: Path, report: ComparisonReport) -> None:
    mdir = out / "metrics"
    mdir.mkdir(exist_ok=True)
    routing_rows = []
    for kind, recs in report.records.items():
        for t, rec in enumerate(recs):
            label = _trial_label(kind, t)
            (mdir / f"{label}.csv").write_text(metrics_csv_text(rec.steps, rec.num_experts, rec.seeds))
            if rec.final_val_freq:
                routing_rows.append((label, rec.final_val_freq))
    summary = report.to_dict()
    summary["schema"] = SUMMARY_SCHEMA
    summary["comparison_schema"] = report.schema
    _dump(out / "summary.json", summary)
    (out / "routing.csv").write_text(_routing_csv(routing_rows, report.seeds))


def load_run_dir(run_dir):
    """Load ``run.json``; returns a RunRecord or a ComparisonReport."""
    path = Path(run_dir) / "run.json"
    data = json.loads(path.read_text())
    if data.get("schema") != RUN_FILE_SCHEMA:
        raise ValueError(f"{path}: unsupported schema {data.get('schema')!r}")
    if data["type"] == "run":
        return record_from_dict(data["record"])
    rep = data["report"]
    records = {k: [record_from_dict(r) for r in recs] for k, recs in data["records"].items()}
    return ComparisonReport(
        kinds=rep["kinds"],
        trials=rep["trials"],
        seeds=rep["seeds"],
        config=rep["config"],
        summaries={k: KindSummary(**s) for k, s in rep["summaries"].items()},
        records=records,
        schema=rep["schema"],
    )


def render(run_dir) -> Path:
    """Regenerate the derived files of ``run_dir`` from its ``run.json``."""
    out = Path(run_dir)
    loaded = load_run_dir(out)
    if isinstance(loaded, RunRecord):
        _render_run(out, loaded)
    else:
        _render_comparison(out, loaded)
    return out
