import json
import os
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from handxfer.fixtures import DATA_DIR, grasp_mesh, synth3_chain
from handxfer.geometry import box_mesh, icosphere

# criterion lines collected by test_acceptance.py, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def chain():
    return synth3_chain()


@pytest.fixture(scope="session")
def sphere():
    return icosphere(1.0, 2)


@pytest.fixture(scope="session")
def cube():
    return box_mesh(1.0)


@pytest.fixture(scope="session")
def grasp():
    return grasp_mesh()


def _copy_demo(dst):
    dst.mkdir(parents=True, exist_ok=True)
    for name in ("synth3.json", "sphere.obj", "demo_human.jsonl", "demo_config.json"):
        shutil.copy(DATA_DIR / name, dst / name)
    return dst / "demo_config.json"


@pytest.fixture
def demo_config(tmp_path):
    """Writable copy of the bundled demo inputs."""
    return _copy_demo(tmp_path / "demo")


@pytest.fixture(scope="session")
def demo_runs(tmp_path_factory):
    """Two independent ``run-all`` executions of the demo, launched as separate processes."""
    root = tmp_path_factory.mktemp("demo_runs")
    cfg = _copy_demo(root / "inputs")
    env = dict(os.environ, HANDXFER_LOG_LEVEL="WARNING")
    procs, outs = [], []
    for k in range(2):
        out = root / f"run{k}"
        outs.append(out)
        procs.append(subprocess.Popen(
            [sys.executable, "-m", "handxfer.cli", "run-all", "--config", str(cfg),
             "--output", str(out)],
            env=env, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True))
    for p in procs:
        _, err = p.communicate(timeout=900)
        assert p.returncode == 0, err
    return outs


def read_jsonl(path):
    lines = Path(path).read_text().splitlines()
    return json.loads(lines[0]), [json.loads(l) for l in lines[1:]]


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
