"""Per-stage latency over a sweep of seeds with randomised routes.

Each seed draws three vehicles on random waypoint routes and reports the
detection, translation, reconciliation and storage figures of every episode.
"""

import argparse
import json
import random
import statistics
import sys
import tempfile
from pathlib import Path

from fleetsim.scenario.config import DATA_DIR, from_dict
from fleetsim.scenario.runner import Simulation

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))
from oracles import random_waypoints, route_dicts  # noqa: E402


def summarize(name, xs, unit):
    if not xs:
        print(f"{name:16s} n=0")
        return
    print(f"{name:16s} n={len(xs):4d}  mean {statistics.fmean(xs):8.2f}{unit}  max {max(xs):8.2f}{unit}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--duration", type=float, default=90.0)
    args = ap.parse_args()

    rules = json.loads((DATA_DIR / "default.json").read_text())["operator_rules"]
    lat = {"detection_ms": [], "translation_ms": [], "reconciliation_s": [], "storage_s": []}
    with tempfile.TemporaryDirectory() as tmp:
        for seed in range(args.seeds):
            rng = random.Random(seed)
            routes = {v: random_waypoints(rng) for v in range(3)}
            cfg = from_dict(
                {"N": 3, "M": 3, "duration": args.duration, "seed": seed, "routes": route_dicts(routes), "operator_rules": rules},
                DATA_DIR,
            )
            report = Simulation(cfg, Path(tmp) / str(seed)).run().to_dict()
            for key, xs in lat.items():
                xs.extend(report["latency"][key])
    summarize("detection", lat["detection_ms"], "ms")
    summarize("translation", lat["translation_ms"], "ms")
    summarize("reconciliation", lat["reconciliation_s"], "s")
    summarize("storage", lat["storage_s"], "s")


if __name__ == "__main__":
    main()
