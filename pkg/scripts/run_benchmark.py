#!/usr/bin/env python3
"""Paired pruning benchmark: embedding-space compensation vs the
layer-wise least-squares baseline, over seeded synthetic tasks.

Writes one CSV row per (seed, method) with pre- and post-fine-tune
accuracy; prints the paired summary.  All knobs of the benchmark
settings are exposed so both the hard default operating point and
gentler variants can be reproduced:

    python3 scripts/run_benchmark.py --out results.csv
    python3 scripts/run_benchmark.py --seeds 3 --classes 4 \
        --separation 1.5 --noise 0.8 --jitter 2 --train-epochs 20
"""

import argparse
import sys
import time

import numpy as np

from ldrf.benchmark import (
    BenchmarkSettings,
    paired_drops,
    prepare_case,
    results_to_csv,
    run_pair,
)
from ldrf.pruner import OptimSettings


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    defaults = BenchmarkSettings()
    ap.add_argument("--out", required=True, help="CSV output path")
    ap.add_argument("--seeds", type=int, default=defaults.seeds)
    ap.add_argument("--keep-ratio", type=float, default=defaults.keep_ratio)
    ap.add_argument("--energy", type=float, default=defaults.energy)
    ap.add_argument("--criterion", default=defaults.criterion)
    ap.add_argument("--classes", type=int, default=defaults.classes)
    ap.add_argument("--separation", type=float, default=defaults.separation)
    ap.add_argument("--noise", type=float, default=defaults.noise)
    ap.add_argument("--jitter", type=int, default=defaults.jitter)
    ap.add_argument("--samples", type=int, default=defaults.train_samples)
    ap.add_argument("--test-samples", type=int, default=defaults.test_samples)
    ap.add_argument("--train-epochs", type=int, default=defaults.train_epochs)
    ap.add_argument("--finetune-epochs", type=int,
                    default=defaults.finetune_epochs)
    ap.add_argument("--lr", type=float, default=defaults.optim.lr)
    ap.add_argument("--iters", type=int, default=defaults.optim.iters)
    args = ap.parse_args(argv)

    settings = BenchmarkSettings(
        seeds=args.seeds, keep_ratio=args.keep_ratio, energy=args.energy,
        criterion=args.criterion, classes=args.classes,
        separation=args.separation, noise=args.noise, jitter=args.jitter,
        train_samples=args.samples, test_samples=args.test_samples,
        train_epochs=args.train_epochs, finetune_epochs=args.finetune_epochs,
        optim=OptimSettings(lr=args.lr, iters=args.iters),
    )

    t0 = time.monotonic()
    rows = []
    for seed in range(settings.seeds):
        case = prepare_case(seed, settings)
        rows.extend(run_pair(case, settings))
        ldrf_row, base_row = rows[-2], rows[-1]
        print(f"seed {seed}: energy {case.energy:.2f} "
              f"base acc {case.base_acc:.3f}  "
              f"ldrf {ldrf_row['pre_ft_acc']:.3f}  "
              f"baseline {base_row['pre_ft_acc']:.3f}")

    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(results_to_csv(rows))

    drops = paired_drops(rows)
    wins = sum(1 for l, b in drops if l < b)
    med_l = float(np.median([d[0] for d in drops]))
    med_b = float(np.median([d[1] for d in drops]))
    print(f"\npaired seeds: {len(drops)}  ldrf wins: {wins}")
    print(f"median accuracy drop: ldrf {med_l:+.4f}  baseline {med_b:+.4f}")
    print(f"wrote {args.out}  ({time.monotonic() - t0:.0f}s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
