"""Regenerate the bundled data files under src/handxfer/data.

    python scripts/make_fixtures.py [--out DIR]
"""
import argparse
import json
from pathlib import Path

import numpy as np

from handxfer.fixtures import (DATA_DIR, demo_joint_path, grasp_mesh, noisy_contact_trace,
                               synth3_chain, synth3_dict, write_json)
from handxfer.geometry import save_obj, scale_mesh
from handxfer.io import write_human

SCALE = 10 / 9
DEMO_CONFIG = {
    "chain": "synth3.json",
    "mesh": "sphere.obj",
    "human": "demo_human.jsonl",
    "output_dir": "handxfer_out",
    "scale_s": SCALE,
    "seed": 0,
    # alignment residuals in decimetres (see README, retarget stage)
    "retarget": {"search_budget": 1000, "position_scale": 10.0},
    # negative beta1 lets the likelihood gate open (see README, contact stage)
    "contact": {"beta1": -5.0},
    "refine": {"outer_rounds": 3},
    "metrics": {"cd_mode": "bidirectional"},
}


def main(out):
    out.mkdir(parents=True, exist_ok=True)
    write_json(synth3_dict(), out / "synth3.json")
    chain = synth3_chain()
    mesh = grasp_mesh()
    # files hold the human-scale object; the pipeline scales it back up by SCALE
    save_obj(scale_mesh(mesh, 1 / SCALE), out / "sphere.obj")

    Q = demo_joint_path(chain, mesh)
    rng = np.random.default_rng(11)
    K = chain.keypoints_batch(Q) / SCALE + rng.normal(0.0, 0.0005, (len(Q), chain.n_keypoints, 3))
    ts = np.arange(len(Q)) / 30
    write_human(out / "demo_human.jsonl", ts, np.round(K, 7), {"source": "synth3 demo grasp"})
    write_json(DEMO_CONFIG, out / "demo_config.json")

    t, pos, dist, truth = noisy_contact_trace()
    doc = {"dt": 1 / 30, "timestamps": t.tolist(), "positions": np.round(pos, 9).tolist(),
           "distances": np.round(dist, 9).tolist(), "truth": truth.astype(int).tolist(),
           "config": {"beta1": -5.0}}
    (out / "contact_noisy.json").write_text(json.dumps(doc) + "\n")
    for p in sorted(out.iterdir()):
        print(f"{p.name:22s} {p.stat().st_size:8d} bytes")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=DATA_DIR)
    main(ap.parse_args().out)
