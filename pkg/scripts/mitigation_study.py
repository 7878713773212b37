#!/usr/bin/env python3
"""Constrained-activation study: accuracy with and without profiled range
clamping, on both engines, across a BER grid (paired seeds).

    python3 scripts/mitigation_study.py --mode clamp --trials 100
"""

import argparse
import sys

from winofi.analyze import Campaign
from winofi.mitigate import profile_ranges
from winofi.modelio import builtin_model, generate_dataset, load_model

BERS = [1e-5, 3e-5, 1e-4, 3e-4]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", help="model directory (default: builtin microcnn-int16)")
    ap.add_argument("--samples", type=int, default=8)
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--mode", choices=["clamp", "zero"], default="clamp")
    args = ap.parse_args()

    model = load_model(args.model) if args.model else builtin_model("microcnn-int16")
    dataset = generate_dataset(model, args.samples, seed=args.seed)
    prof = profile_ranges(model, dataset)
    print(f"profiled ranges: {prof.ranges}", file=sys.stderr)

    print(f"{'engine':>9} {'ber':>9} {'plain':>14} {'constrained':>14} {'gain':>7}")
    for engine in ("direct", "winograd"):
        plain_camp = Campaign(model, dataset, engine, seed=args.seed)
        cons_camp = Campaign(model, dataset, engine, seed=args.seed,
                             ranges=prof, range_mode=args.mode)
        for ber in BERS:
            p = plain_camp.run_point(ber, args.trials)
            c = cons_camp.run_point(ber, args.trials)
            print(f"{engine:>9} {ber:>9g} {p.mean_accuracy:>6.3f}+-{p.ci95_halfwidth:<6.3f}"
                  f" {c.mean_accuracy:>6.3f}+-{c.ci95_halfwidth:<6.3f}"
                  f" {c.mean_accuracy - p.mean_accuracy:>7.3f}")


if __name__ == "__main__":
    main()
