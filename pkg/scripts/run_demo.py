"""Run the bundled demo end to end and print the headline metrics.

    python scripts/run_demo.py [--output DIR] [--jobs N]
"""
import argparse
import json
import shutil
import tempfile
from pathlib import Path

from handxfer.cli import main as cli_main
from handxfer.fixtures import DATA_DIR

INPUTS = ("synth3.json", "sphere.obj", "demo_human.jsonl", "demo_config.json")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--output", default="demo_out")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        for name in INPUTS:
            shutil.copy(DATA_DIR / name, Path(tmp) / name)
        code = cli_main(["run-all", "--config", str(Path(tmp) / "demo_config.json"),
                         "--output", args.output, "--jobs", str(args.jobs)])
    if code:
        raise SystemExit(code)
    reports = json.loads((Path(args.output) / "metrics.json").read_text())["reports"]
    for name, r in reports.items():
        print(f"{name:>10}: cd {r['cd']['bidirectional']:.2e} m (literal {r['cd']['literal']:.2e}), "
              f"max pen {1e3 * r['max_penetration']:.3f} mm, rms acc {r['rms_acc']:.3f} rad/s^2, "
              f"velocity kl {r['velocity_kl']:.3f}")


if __name__ == "__main__":
    main()
