#!/usr/bin/env python3
"""Side-by-side strategy comparison on the synthetic steering task.

Writes one config per strategy (shared data/model settings), runs them
through the CLI compare path, and leaves metrics/checkpoints plus a
compare.csv summary under --out.
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

from dflsim import cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("runs/compare"))
    parser.add_argument("--rounds", type=int, default=500)
    parser.add_argument("--samples", type=int, default=5000)
    parser.add_argument("--skew", type=float, default=0.8)
    parser.add_argument("--topology", default="gaia11")
    parser.add_argument("--model", default="fadnet", choices=["fadnet", "backbone_only"])
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    shared = {
        "model_kind": args.model,
        "topology": args.topology,
        "rounds": args.rounds,
        "sample_count": args.samples,
        "skew": args.skew,
        "seed": args.seed,
        "eval_interval": max(1, args.rounds // 20),
    }
    paths = []
    for strategy in ("cll", "sfl", "dfl"):
        path = args.out / f"{strategy}.json"
        path.write_text(json.dumps({"strategy": strategy, **shared}, indent=2))
        paths.append(str(path))
    return cli.main(["compare", *paths, "--out", str(args.out)])


if __name__ == "__main__":
    raise SystemExit(main())
