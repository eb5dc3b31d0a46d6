#!/usr/bin/env python
"""Run every packaged fault scenario across several seeds and report pass/fail.

Each scenario is executed deterministically per seed; the process exits
nonzero if any check in any scenario fails, which makes this suitable as a
smoke gate in automation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from rowshare.faultsim import list_scenarios, run_scenario


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--seeds", default="0,1,2", help="comma separated seeds (default 0,1,2)"
    )
    parser.add_argument(
        "--scenario", action="append", help="run only this scenario (repeatable)"
    )
    parser.add_argument(
        "--json", action="store_true", help="emit the full reports as JSON"
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)

    seeds = [int(part) for part in args.seeds.split(",") if part]
    names = args.scenario or list_scenarios()
    reports = []
    failures = 0
    for name in names:
        for seed in seeds:
            report = run_scenario(name, seed=seed)
            reports.append(report)
            verdict = "PASS" if report.passed else "FAIL"
            print(f"{verdict}  {name}  seed={seed}  checks={len(report.checks)}")
            if not report.passed:
                failures += 1
                for check in report.failures():
                    print(f"      failed: {check.name}  {check.detail}")
    if args.json:
        print(json.dumps([report.to_dict() for report in reports], indent=2))
    print(f"{len(reports) - failures}/{len(reports)} scenario runs passed")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
