#!/usr/bin/env python3
"""Sweep the five neuron-selection criteria over seeded benchmark cases
and report per-criterion median pre-fine-tune loss.

With ample layer capacity the choice of criterion barely matters; this
script reproduces that comparison and writes per-seed rows to CSV:

    python3 scripts/criterion_sweep.py --out sweep.csv --seeds 10
"""

import argparse
import csv
import sys
import time

import numpy as np

from ldrf.benchmark import BenchmarkSettings, prepare_case
from ldrf.metrics import evaluate
from ldrf.pruner import CRITERIA, OptimSettings, PruneConfig
from ldrf.reconstruct import ldrf_prune_network
from ldrf.recompose import recompose_network, strip_pruned


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, help="CSV output path")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--classes", type=int, default=4)
    ap.add_argument("--separation", type=float, default=1.5)
    ap.add_argument("--noise", type=float, default=0.8)
    ap.add_argument("--jitter", type=int, default=2)
    ap.add_argument("--train-epochs", type=int, default=20)
    ap.add_argument("--keep-ratio", type=float, default=0.5)
    ap.add_argument("--lr", type=float, default=0.02)
    ap.add_argument("--iters", type=int, default=400)
    args = ap.parse_args(argv)

    settings = BenchmarkSettings(
        seeds=args.seeds, keep_ratio=args.keep_ratio, classes=args.classes,
        separation=args.separation, noise=args.noise, jitter=args.jitter,
        train_epochs=args.train_epochs,
    )
    optim = OptimSettings(lr=args.lr, iters=args.iters)

    t0 = time.monotonic()
    cases = [prepare_case(seed, settings) for seed in range(settings.seeds)]
    print(f"prepared {len(cases)} cases in {time.monotonic() - t0:.0f}s")

    rows = []
    medians = {}
    for crit in CRITERIA:
        losses = []
        for case in cases:
            cfg = PruneConfig(energy=case.energy,
                              layers=[dict(e) for e in case.keeps],
                              criterion=crit, optim=optim, seed=case.seed)
            pruned, _ = ldrf_prune_network(case.dec, cfg, case.x_train,
                                           case.y_train, report=case.report)
            slim = strip_pruned(recompose_network(pruned))
            loss, acc = evaluate(slim, case.x_test, case.y_test)
            losses.append(loss)
            rows.append({"criterion": crit, "seed": case.seed,
                         "pre_ft_loss": loss, "pre_ft_acc": acc})
        medians[crit] = float(np.median(losses))
        print(f"{crit:>12}: median loss {medians[crit]:.4f}")

    band = max(medians.values()) / min(medians.values())
    print(f"median-loss band (max/min): {band:.3f}")

    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["criterion", "seed", "pre_ft_loss", "pre_ft_acc"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {args.out}  ({time.monotonic() - t0:.0f}s total)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
