#!/usr/bin/env python
"""Sweep the benchmark over dossier counts and shared percentages.

Writes one CSV row per configuration and prints the overhead trend plus a
least squares fit of total wall time against dossier count, so scaling
behaviour is visible at a glance.
"""

from __future__ import annotations

import argparse
import logging
import sys

from rowshare.bench import BenchConfig, csv_row, linear_fit, sweep


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--dossiers", default="1000,10000,100000",
        help="comma separated dossier counts",
    )
    parser.add_argument(
        "--shared", default="20", help="comma separated shared percentages"
    )
    parser.add_argument("--size", type=int, default=200, help="dossier bytes")
    parser.add_argument("--receivers", type=int, default=1)
    parser.add_argument("--clients", type=int, default=2)
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--csv", default="bench_sweep.csv", help="output CSV path")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)

    counts = [int(part) for part in args.dossiers.split(",") if part]
    percentages = [float(part) for part in args.shared.split(",") if part]
    configs = [
        BenchConfig(
            num_dossiers=count,
            pct_shared=pct,
            dossier_size_bytes=args.size,
            num_clients=args.clients,
            receivers_per_dossier=args.receivers,
            repeats=args.repeats,
            seed=args.seed,
        )
        for pct in percentages
        for count in counts
    ]
    results = sweep(configs, csv_path=args.csv)
    rows = [csv_row(encrypted, plain) for encrypted, plain in results]
    print(f"wrote {len(rows)} rows to {args.csv}")

    for pct in percentages:
        subset = [row for row in rows if float(row["pct_shared"]) == pct]
        print(f"\nshared={pct:g}%")
        print(f"  {'dossiers':>10}  {'total_s':>10}  {'plain_s':>10}  {'overhead%':>10}")
        for row in subset:
            print(
                f"  {int(row['num_dossiers']):>10}"
                f"  {float(row['total_s']):>10.3f}"
                f"  {float(row['plain_total_s']):>10.3f}"
                f"  {float(row['overhead_pct']):>10.2f}"
            )
        if len(subset) >= 2:
            xs = [float(row["num_dossiers"]) for row in subset]
            ys = [float(row["total_s"]) for row in subset]
            slope, intercept, r2 = linear_fit(xs, ys)
            print(
                f"  fit: total_s = {slope:.3e} * dossiers + {intercept:.3f}"
                f"  (r2 = {r2:.4f})"
            )
    return 0


if __name__ == "__main__":
    sys.exit(main())
