#!/usr/bin/env python3
"""Regenerate the bundled topology fixtures.

The 11- and 22-silo graphs mirror the published silo counts of the two
reference deployments, but the delay annotations are synthetic: the real
link latencies/bandwidths are not public.  Layout is a ring plus seeded
random chords, which keeps the graphs sparse but well connected.
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "dflsim" / "fixtures"


def make_topology(n: int, n_chords: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    silos = [
        {"id": i, "compute_time_s": round(float(rng.uniform(0.05, 0.22)), 4)}
        for i in range(n)
    ]
    pairs = {(i, (i + 1) % n) for i in range(n)}
    pairs = {(min(a, b), max(a, b)) for a, b in pairs}
    while len(pairs) < n + n_chords:
        a, b = sorted(rng.choice(n, size=2, replace=False).tolist())
        pairs.add((a, b))
    links = [
        {
            "src": a,
            "dst": b,
            "latency_s": round(float(rng.uniform(0.01, 0.09)), 4),
            "bandwidth_Bps": float(round(rng.uniform(2.5e7, 2.0e8), -4)),
        }
        for a, b in sorted(pairs)
    ]
    return {"silos": silos, "links": links, "undirected": True}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=FIXTURES)
    args = parser.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for name, n, chords, seed in (("gaia11", 11, 8, 11), ("nws22", 22, 16, 22)):
        topo = make_topology(n, chords, seed)
        path = args.out / f"{name}.json"
        path.write_text(json.dumps(topo, indent=2) + "\n")
        print(f"wrote {path} ({n} silos, {len(topo['links'])} links)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
