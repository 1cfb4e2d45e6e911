"""Pilot for the expectation-alignment threshold.

Measures the RMS relative deviation of a single router draw's equivalent
weight from W0 over several base seeds. The suite's calibrated bound is
4 * max_rms / sqrt(N).
"""

import argparse
import math

from gse.harness.verify import suite_expectation_alignment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(1000, 1010)))
    ap.add_argument("--draws", type=int, default=2000)
    args = ap.parse_args()
    worst = 0.0
    for seed in args.seeds:
        rep = suite_expectation_alignment(seed, args.draws)
        rms = rep.details["single_draw_rms"]
        dev = rep.checks[0].measured
        worst = max(worst, rms)
        print(f"seed {seed}: single-draw rms {rms:.4f}  mean deviation {dev:.5f}")
    print(f"max single-draw rms {worst:.4f}; 4-sigma bound at N={args.draws}: {4 * worst / math.sqrt(args.draws):.5f}")


if __name__ == "__main__":
    main()
