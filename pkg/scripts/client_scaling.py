#!/usr/bin/env python3
"""Scale the number of simultaneous vehicles with and without stations.

Usage: python3 scripts/client_scaling.py [--seed N] [--bundle-mb MB]
                                         [--csv PATH]
"""
import argparse

from ota_stations.scenario import ScenarioConfig, run_scenario


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--bundle-mb", type=float, default=10.0)
    parser.add_argument("--csv", default=None)
    args = parser.parse_args()

    lines = ["clients,coverage_pct,stations,mean_download_ms"]
    for coverage in (0, 100):
        for clients in (1, 5, 10, 20):
            stations = max(1, clients // 2) if coverage else 1
            config = ScenarioConfig(
                name=f"scaling-{clients}-{coverage}", seed=args.seed,
                bundle_bytes=int(args.bundle_mb * 1e6), image_count=5,
                vehicles=clients, stations=stations, coverage_pct=coverage,
                mix_hit=100, horizon_ms=4_000_000.0).validate()
            report = run_scenario(config)
            lines.append(f"{clients},{coverage},{stations},"
                         f"{report.mean_download_ms:.3f}")
    text = "\n".join(lines) + "\n"
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text, end="")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
