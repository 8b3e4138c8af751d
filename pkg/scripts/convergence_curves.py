#!/usr/bin/env python3
"""Convergence-vs-simulated-wall-clock curves for both bundled topologies.

Runs the peer-to-peer strategy on the 11- and 22-silo fixtures with shared
data settings and writes one metrics.csv per topology; plot test_rmse against
sim_time_s with any external tool to reproduce the usual convergence figure.
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

from dflsim import cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("runs/convergence"))
    parser.add_argument("--rounds", type=int, default=500)
    parser.add_argument("--samples", type=int, default=5000)
    parser.add_argument("--skew", type=float, default=0.8)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    status = 0
    for topology in ("gaia11", "nws22"):
        path = args.out / f"dfl_{topology}.json"
        path.write_text(json.dumps({
            "strategy": "dfl",
            "topology": topology,
            "rounds": args.rounds,
            "sample_count": args.samples,
            "skew": args.skew,
            "seed": args.seed,
            "eval_interval": max(1, args.rounds // 50),
        }, indent=2))
        status |= cli.main(["run", str(path), "--out", str(args.out / topology)])
    return status


if __name__ == "__main__":
    raise SystemExit(main())
