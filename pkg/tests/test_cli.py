import json

import numpy as np
import pytest

from handxfer.cli import main
from handxfer.contact import ContactMap, ContactTimeline, FingertipTrace
from handxfer.config import load_config
from handxfer.io import file_digest, read_human, read_joints, write_contacts, write_human
from handxfer.hand_model import FINGERS, load_chain

from conftest import _copy_demo, read_jsonl


@pytest.fixture
def small(tmp_path):
    """The demo inputs cut to 8 frames with a cheap search budget."""
    cfg_path = _copy_demo(tmp_path / "in")
    h = cfg_path.parent / "demo_human.jsonl"
    _, ts, K = read_human(h)
    write_human(h, ts[40:48], K[40:48])
    cfg = json.loads(cfg_path.read_text())
    cfg["retarget"]["search_budget"] = 300
    cfg["refine"]["outer_rounds"] = 1
    cfg["output_dir"] = str(tmp_path / "out")
    cfg_path.write_text(json.dumps(cfg))
    return cfg_path


def run(*args):
    return main([str(a) for a in args])


def test_validate(small, capsys):
    assert run("validate", "--config", small) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["frames"] == 8 and info["n_dof"] == 28


def test_missing_mesh_fails_before_compute(small, tmp_path):
    (small.parent / "sphere.obj").unlink()
    assert run("retarget", "--config", small) == 2
    assert not (tmp_path / "out").exists()


def test_bad_flag_values(small):
    assert run("retarget", "--config", small, "--jobs", 0) == 2
    assert run("validate", "--config", small.parent / "absent.json") == 2


def test_stages_and_manifest(small, tmp_path, capsys):
    out = tmp_path / "out"
    for stage in ("retarget", "contact", "refine", "metrics"):
        assert run(stage, "--config", small) == 0, stage
    capsys.readouterr()
    man = json.loads((out / "manifest.json").read_text())
    assert set(man["stages"]) == {"retarget", "contact", "refine", "metrics"}
    for stage, rec in man["stages"].items():
        for name, digest in rec["outputs"].items():
            assert file_digest(out / name) == digest
    assert man["inputs"]["human"]["sha256"] == file_digest(small.parent / "demo_human.jsonl")
    header, recs = read_jsonl(out / "refined.jsonl")
    assert header["weights"]["w_dis"] == 1.0 and len(recs) == 8
    assert all("energy" in r and "fingers" in r for r in recs)
    rep = json.loads((out / "metrics.json").read_text())["reports"]
    for name in ("retargeted", "refined"):
        assert set(rep[name]["cd"]) == {"literal", "bidirectional"}
        assert rep[name]["cd_selected"]["mode"] == "bidirectional"

    # literal headline
    assert run("metrics", "--config", small, "--cd-mode", "literal") == 0
    doc = json.loads((out / "metrics.json").read_text())
    assert doc["cd_mode"] == "literal"

    # a different seed changes the digest, so downstream stages refuse the old files
    assert run("contact", "--config", small, "--seed", 9) == 2
    assert run("contact", "--config", small, "--seed", 9, "--force") == 0


def test_self_comparison_scores_zero(small, tmp_path):
    """Human keypoints taken from the retargeted joints themselves give cd = 0 and kl = 0."""
    assert run("retarget", "--config", small) == 0
    cfg = load_config(small)
    chain = load_chain(cfg.chain)
    _, ts, Q, _ = read_joints(tmp_path / "out" / "retargeted.jsonl", "retargeted", chain.n_dof)
    write_human(cfg.human, ts, chain.keypoints_batch(Q) / cfg.scale_s)
    assert run("metrics", "--config", small, "--force") == 0
    rep = json.loads((tmp_path / "out" / "metrics.json").read_text())["reports"]["retargeted"]
    assert rep["cd"]["literal"] < 1e-12 and rep["cd"]["bidirectional"] < 1e-12
    assert rep["velocity_kl"] == pytest.approx(0.0, abs=1e-12)


def _all_false_contacts(path, header, ts):
    n = len(ts)
    tl = ContactTimeline(np.zeros((n, 5), bool), np.zeros((n, 5), bool),
                         [ContactMap({f: [] for f in FINGERS}) for _ in range(n)],
                         FingertipTrace(ts, np.zeros((n, 5, 3)), np.zeros((n, 5))))
    write_contacts(path, header, ts, tl)


def test_all_false_contacts_leave_sequence_unchanged(small, tmp_path):
    out = tmp_path / "out"
    assert run("retarget", "--config", small) == 0
    _, ts, Q, _ = read_joints(out / "retargeted.jsonl", "retargeted")
    header = {"config_digest": load_config(small).digest(),
              "retargeted_sha256": file_digest(out / "retargeted.jsonl")}
    _all_false_contacts(out / "contacts.jsonl", header, ts)
    assert run("refine", "--config", small) == 0
    _, _, Qr, _ = read_joints(out / "refined.jsonl", "refined")
    assert Qr.tobytes() == Q.tobytes()


def test_corrupted_contacts_name_the_line(small, tmp_path, caplog):
    out = tmp_path / "out"
    assert run("retarget", "--config", small) == 0
    assert run("contact", "--config", small) == 0
    lines = (out / "contacts.jsonl").read_text().splitlines()
    lines[4] = lines[4].replace('"states":[', '"states":[1,')
    (out / "contacts.jsonl").write_text("\n".join(lines) + "\n")
    assert run("refine", "--config", small, "--force") == 2
    assert "contacts.jsonl:5:" in caplog.text


def test_frame_count_mismatch(small, tmp_path, caplog):
    out = tmp_path / "out"
    assert run("retarget", "--config", small) == 0
    lines = (out / "retargeted.jsonl").read_text().splitlines()
    (out / "retargeted.jsonl").write_text("\n".join(lines[:-1]) + "\n")
    assert run("contact", "--config", small) == 2
    assert "7 frames" in caplog.text


def test_compute_failure_exit_code(small, tmp_path, monkeypatch):
    from handxfer import pipeline

    def boom(*a, **k):
        raise RuntimeError("frame 3: objective is not finite")

    monkeypatch.setattr(pipeline, "retarget_sequence", boom)
    assert run("retarget", "--config", small) == 3
