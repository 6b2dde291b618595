#!/usr/bin/env python3
"""Sweep station coverage and report mean download time and cellular bytes.

Usage: python3 scripts/coverage_sweep.py [--seed N] [--bundle-mb MB]
                                         [--csv PATH]
"""
import argparse
import dataclasses

from ota_stations.scenario import ScenarioConfig, bandwidth_cost, run_scenario


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--bundle-mb", type=float, default=100.0)
    parser.add_argument("--csv", default=None)
    args = parser.parse_args()

    base = ScenarioConfig(
        name="coverage-sweep", seed=args.seed,
        bundle_bytes=int(args.bundle_mb * 1e6), image_count=5,
        mix_hit=100, horizon_ms=4_000_000.0)
    lines = ["coverage_pct,mean_download_ms,cellular_bytes,relative_cost"]
    for coverage in (0, 25, 50, 75, 100):
        config = dataclasses.replace(base, coverage_pct=coverage).validate()
        report = run_scenario(config)
        _, relative = bandwidth_cost(report, 1e-9)
        lines.append(f"{coverage},{report.mean_download_ms:.3f},"
                     f"{report.bytes_by_class.get('cellular', 0)},"
                     f"{relative:.6f}")
    text = "\n".join(lines) + "\n"
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text, end="")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
