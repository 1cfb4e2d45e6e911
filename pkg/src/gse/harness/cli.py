"""``gse`` command line.

Exit codes: 0 success, 1 verification failure, 2 invalid input, 3 runtime
failure. Output directories live under ``$GSE_OUTPUT_DIR`` (default ``runs``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from gse.baselines import gse_param_count, match_budget
from gse.core import build_layer, partition_spectrum, scaling_factors
from gse.harness.compare import parse_kind, run_comparison, run_trial
from gse.harness.config import ConfigError, load_config
from gse.harness.report import render, write_comparison, write_run
from gse.harness.verify import SUITES, run_suite
from gse.numkit import svd
from gse.serialization import read_matrix

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2, 3
OUTPUT_ENV = "GSE_OUTPUT_DIR"


class InputError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def _load(args):
    try:
        return load_config(args.config, getattr(args, "set", None) or ())
    except (ConfigError, ValueError) as exc:
        raise InputError(str(exc)) from None


def cmd_inspect(args) -> int:
    cfg = _load(args)
    try:
        w0 = read_matrix(args.weight_file)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from None
    g = cfg.gse
    r_g, num_experts, k = g.layout
    try:
        dec = svd(w0)
        gen_seg, segs = partition_spectrum(dec, r_g, g.d, num_experts)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    scales = scaling_factors(segs, g.s_base)
    layer = build_layer(w0, g)
    print(f"weight: {args.weight_file}  shape {w0.shape[0]}x{w0.shape[1]}  rank slots {dec.rank_slots}")
    print(f"variant: {g.variant.value}  r_g={r_g}  d={g.d}  E={num_experts}  k={k}")
    print(f"generalized: sigma[{gen_seg.start}:{gen_seg.stop}] = {np.array2string(gen_seg.sigma, precision=6)}"
          f"  s_g={g.s_g}")
    print("specialized:")
    print("  expert  sigma-range   Tr(Sigma)        s_i")
    for i, (seg, s) in enumerate(zip(segs, layer.scales)):
        print(f"  {i:>6}  [{seg.start:>3}:{seg.stop:<3}]  {seg.trace_sigma:12.6g}  {s:12.6g}")
    if not np.allclose(scales, layer.scales):
        print(f"  (trace-inverse factors would be {np.array2string(scales, precision=6)})")
    tail = dec.sigma[segs[-1].stop:] if segs else dec.sigma[gen_seg.stop:]
    print(f"untouched tail: {tail.size} singular values, sum {tail.sum():.6g}")
    print("trainable parameters:")
    print(f"  gse          {gse_param_count(w0.shape, g)}")
    for kind, spec in match_budget(w0.shape, g).items():
        if kind == "gse":
            continue
        flag = "ok" if spec.within_budget else "outside 3%"
        print(f"  {kind:<12} {spec.param_count}  (rank {spec.rank}, {spec.rel_gap:+.2%}, {flag})")
    return EXIT_OK


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def cmd_verify(args) -> int:
    if not 0 <= args.seed < 2**64:
        raise InputError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
    names = sorted(SUITES) if args.suite == "all" else [args.suite]
    all_passed = True
    for name in names:
        rep = run_suite(name, args.seed)
        all_passed &= rep.passed
        print(f"[{'PASS' if rep.passed else 'FAIL'}] {name} (seed {args.seed})")
        for c in rep.checks:
            mark = "ok " if c.passed else "BAD"
            print(f"    {mark} {c.name}: {c.measured:.6g} {c.comparison} {c.threshold:.6g}")
        _write_json(output_root() / f"verify-{name}-seed{args.seed}" / "report.json", rep.to_dict())
    return EXIT_OK if all_passed else EXIT_VERIFY


def cmd_train(args) -> int:
    cfg = _load(args)
    try:
        parse_kind(args.kind)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    rec = run_trial(cfg, args.kind, 0)
    if rec.status == "failed":
        print(rec.error, file=sys.stderr)
        return EXIT_RUNTIME
    out = write_run(output_root() / cfg.output.name, rec)
    print(f"kind {args.kind}: {rec.trainable_params} trainable parameters, {len(rec.steps)} steps")
    print(f"validation L1 {rec.initial_val_loss:.6g} -> {rec.final_val_loss:.6g}")
    if rec.final_val_freq:
        print(f"final selection entropy {rec.final_val_entropy:.6g} nats")
    print(f"wrote {out}")
    if rec.status != "ok":
        print(f"run {rec.status}: {rec.error}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load(args)
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()] if args.kinds else None
    trials = args.trials
    if trials is not None and trials < 1:
        raise InputError(f"--trials must be >= 1, got {trials}")
    try:
        for k in kinds or cfg.compare.kinds:
            parse_kind(k)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    report = run_comparison(cfg, kinds, trials, args.workers)
    out = write_comparison(output_root() / cfg.output.name, report)
    print(f"{'kind':<22}{'params':>8}{'budget':>10}{'median':>14}{'IQR':>12}{'gse wins':>10}")
    for kind, s in report.summaries.items():
        budget = "exempt" if s.budget_exempt else ("ok" if s.within_budget else "OUTSIDE")
        med = "n/a" if s.median is None else f"{s.median:.6g}"
        iqr = "n/a" if s.iqr is None else f"{s.iqr:.3g}"
        wins = "-" if s.wins_vs_reference is None else f"{s.wins_vs_reference}/{report.trials}"
        print(f"{kind:<22}{s.param_count:>8}{budget:>10}{med:>14}{iqr:>12}{wins:>10}")
    for kind, t in report.failed:
        print(f"failed: {kind} trial {t}", file=sys.stderr)
    print(f"wrote {out}")
    if report.failed:
        return EXIT_RUNTIME
    return EXIT_OK if report.budget_ok else EXIT_VERIFY


def cmd_report(args) -> int:
    src = Path(args.source)
    if not (src / "run.json").is_file():
        raise InputError(f"{src} has no run.json")
    try:
        out = render(src)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"cannot read {src / 'run.json'}: {exc}") from None
    print(f"re-rendered {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    ins = sub.add_parser("inspect", help="spectrum partition, scaling factors and parameter counts")
    ins.add_argument("config", help="INI config (only [gse] matters here)")
    ins.add_argument("weight_file", help="gse-matrix/1 text file")
    ins.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    ins.set_defaults(func=cmd_inspect)

    ver = sub.add_parser("verify", help="run a verification suite")
    ver.add_argument("--suite", required=True, choices=sorted(SUITES) + ["all"])
    ver.add_argument("--seed", type=int, default=0)
    ver.set_defaults(func=cmd_verify)

    tr = sub.add_parser("train", help="train one adapter on the synthetic task")
    tr.add_argument("--config", required=True)
    tr.add_argument("--kind", default="gse", help="gse, lora, pissa_style, full_ft or gse/<variant>")
    tr.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    tr.set_defaults(func=cmd_train)

    cmp_ = sub.add_parser("compare", help="budget-matched comparison over paired seeds")
    cmp_.add_argument("--config", required=True)
    cmp_.add_argument("--kinds", help="comma-separated kinds (default from [compare])")
    cmp_.add_argument("--trials", type=int)
    cmp_.add_argument("--workers", type=int)
    cmp_.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    cmp_.set_defaults(func=cmd_compare)

    rep = sub.add_parser("report", help="re-render report files from a run directory")
    rep.add_argument("--from", dest="source", required=True)
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with 2 on bad usage
    try:
        return args.func(args)
    except InputError as exc:
        print(f"gse: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:
        print(f"gse: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
