#!/usr/bin/env python3
"""Compare download times for cache hit, miss, and unknown-model outcomes.

Usage: python3 scripts/cache_mix.py [--seed N] [--bundle-mb MB] [--csv PATH]
"""
import argparse
import dataclasses

from ota_stations.scenario import ScenarioConfig, run_scenario


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--bundle-mb", type=float, default=100.0)
    parser.add_argument("--csv", default=None)
    args = parser.parse_args()

    base = ScenarioConfig(
        name="cache-mix", seed=args.seed,
        bundle_bytes=int(args.bundle_mb * 1e6), image_count=5,
        coverage_pct=100, horizon_ms=4_000_000.0)
    cases = {"hit": (100, 0, 0), "miss": (0, 100, 0), "unknown": (0, 0, 100),
             "cellular": None}
    lines = ["outcome,mean_download_ms"]
    for label, mix in cases.items():
        if mix is None:
            config = dataclasses.replace(base, coverage_pct=0)
        else:
            hit, miss, unknown = mix
            config = dataclasses.replace(base, mix_hit=hit, mix_miss=miss,
                                         mix_unknown=unknown)
        report = run_scenario(config.validate())
        lines.append(f"{label},{report.mean_download_ms:.3f}")
    text = "\n".join(lines) + "\n"
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text, end="")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
