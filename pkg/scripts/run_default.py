"""Run the shipped default scenario and print the headline numbers."""

import argparse
import json
from pathlib import Path

from fleetsim.scenario.config import default_config
from fleetsim.scenario.runner import Simulation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="out/default")
    args = ap.parse_args()

    out = Path(args.out_dir)
    report = Simulation(default_config(), out).run().to_dict()
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")

    for ep in report["episodes"]:
        print(
            f"{ep['correlation_key']}: enter {ep['t_enter']:.1f}s leave {ep['t_leave']}s "
            f"detect {ep['detection_ms']:.0f}ms reconcile {ep['reconciliation_s']:.2f}s entries {ep['entries']}"
        )
    print(f"pods launched {report['pods']['dynamic_launched']}, terminated {report['pods']['dynamic_terminated_at_end']}")
    print(f"wall clock {report['wall_clock']['run_s']:.2f}s")


if __name__ == "__main__":
    main()
