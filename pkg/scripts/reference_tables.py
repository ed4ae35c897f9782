#!/usr/bin/env python3
"""Print the per-layer sparsity table and conv MAC speed-ups for the
four reference keep configurations of the six-conv network.

Usage: python3 scripts/reference_tables.py [--csv out.csv]
"""

import argparse
import csv
import sys

from ldrf.metrics import chain_counts, net_macs, sparsity_report
from ldrf.synth import VGG9_CONV_CHANNELS, VGG9_CONV_NAMES, make_vgg9_shapes

SPEEDUP_KEEPS = {
    2: (12, 36, 74, 98, 236, 256),
    3: (6, 18, 65, 98, 178, 206),
    4: (6, 18, 37, 69, 178, 206),
    5: (6, 18, 37, 49, 152, 206),
}


def build_rows():
    original = chain_counts(VGG9_CONV_CHANNELS, 3)
    base_macs, _ = net_macs(make_vgg9_shapes(VGG9_CONV_CHANNELS), scope="conv")
    rows = []
    for factor in sorted(SPEEDUP_KEEPS):
        keeps = SPEEDUP_KEEPS[factor]
        report = sparsity_report(original, chain_counts(keeps, 3))
        slim_macs, _ = net_macs(make_vgg9_shapes(keeps), scope="conv")
        rows.append({
            "factor": factor,
            "keeps": keeps,
            "sparsity": [r["sparsity_percent"] for r in report],
            "ratio": base_macs / slim_macs,
        })
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--csv", help="also write the table as CSV")
    args = ap.parse_args(argv)

    rows = build_rows()
    header = ["layer", "n"]
    for row in rows:
        header += [f"{row['factor']}x keep", f"{row['factor']}x spar%"]
    widths = [max(10, len(h) + 1) for h in header]
    print("".join(h.rjust(w) for h, w in zip(header, widths)))
    for i, (name, n) in enumerate(zip(VGG9_CONV_NAMES, VGG9_CONV_CHANNELS)):
        cells = [name, str(n)]
        for row in rows:
            cells += [str(row["keeps"][i]), f"{row['sparsity'][i]:.1f}"]
        print("".join(c.rjust(w) for c, w in zip(cells, widths)))
    print()
    for row in rows:
        print(f"{row['factor']}x configuration: conv MAC speed-up "
              f"{row['ratio']:.2f}x")

    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i, (name, n) in enumerate(
                    zip(VGG9_CONV_NAMES, VGG9_CONV_CHANNELS)):
                cells = [name, n]
                for row in rows:
                    cells += [row["keeps"][i], row["sparsity"][i]]
                writer.writerow(cells)
        print(f"wrote {args.csv}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
