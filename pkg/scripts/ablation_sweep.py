"""Paired-seed wins of full GSE over its ablations under config overrides.

Example::

    python scripts/ablation_sweep.py --trials 5 --set train.optimizer=sgd --set train.lr=0.05
"""

import argparse
from pathlib import Path

from gse.harness.compare import paired_wins, run_comparison
from gse.harness.config import load_config

DEFAULT_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "default.ini"
KINDS = ["gse", "lora", "gse/no_svd_init", "gse/no_grad_scaling", "gse/no_aux"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(DEFAULT_CONFIG))
    ap.add_argument("--trials", type=int, default=10)
    ap.add_argument("--kinds", default=",".join(KINDS))
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    args = ap.parse_args()

    cfg = load_config(args.config, args.set)
    rep = run_comparison(cfg, args.kinds.split(","), args.trials)
    s = rep.summaries
    print(f"{'kind':<22}{'median val L1':>16}{'gse wins':>10}")
    for kind, summary in s.items():
        wins = "-" if summary.wins_vs_reference is None else f"{summary.wins_vs_reference}/{rep.trials}"
        print(f"{kind:<22}{summary.median:>16.6g}{wins:>10}")
    if "gse/no_aux" in s:
        ent = paired_wins(s["gse"].final_entropies, s["gse/no_aux"].final_entropies, higher=True)
        print(f"entropy with balance term higher in {ent}/{rep.trials} trials")


if __name__ == "__main__":
    main()
