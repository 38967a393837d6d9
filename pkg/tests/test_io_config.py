import json

import numpy as np
import pytest

from handxfer.config import ConfigError, config_from_dict, load_config
from handxfer.io import (FormatError, canonical, file_digest, read_human, read_joints, read_jsonl,
                         write_human, write_joints)


def test_human_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    ts, K = np.arange(4) / 30, rng.normal(size=(4, 13, 3))
    p = tmp_path / "h.jsonl"
    d1 = write_human(p, ts, K)
    header, ts2, K2 = read_human(p)
    assert header["n_keypoints"] == 13
    np.testing.assert_array_equal(ts2, ts)
    np.testing.assert_array_equal(K2, K)
    # same content, same bytes
    assert write_human(tmp_path / "h2.jsonl", ts, K) == d1 == file_digest(p)


def test_joints_roundtrip_with_extra(tmp_path):
    Q = np.random.default_rng(1).normal(size=(3, 28))
    p = tmp_path / "q.jsonl"
    write_joints(p, "refined", {"config_digest": "abc"}, np.arange(3.0), Q,
                 [{"energy": [float(i)]} for i in range(3)])
    header, ts, Q2, extra = read_joints(p, "refined", 28)
    assert header == {"format": "handxfer/refined", "config_digest": "abc"}
    np.testing.assert_array_equal(Q2, Q)
    assert extra[2] == {"energy": [2.0]}
    with pytest.raises(FormatError, match="expected format handxfer/retargeted"):
        read_joints(p, "retargeted")


@pytest.mark.parametrize("bad, msg", [
    ('{"t": 0.1, "keypoints": [[0, 0]]}', "shape"),
    ('{"t": 0.1}', "missing field 'keypoints'"),
    ("{not json", "invalid JSON"),
    ("[1, 2]", "expected an object"),
])
def test_corrupted_line_is_named(tmp_path, bad, msg):
    p = tmp_path / "h.jsonl"
    write_human(p, np.arange(2) / 30, np.zeros((2, 13, 3)))
    lines = p.read_text().splitlines()
    lines[2] = bad
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(FormatError, match=rf":3: .*{msg}"):
        read_human(p)


def test_nonincreasing_timestamps(tmp_path):
    p = tmp_path / "h.jsonl"
    write_human(p, np.array([0.0, 0.0]), np.zeros((2, 13, 3)))
    with pytest.raises(FormatError, match=":3: timestamps"):
        read_human(p)


def test_empty_and_missing_files(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    with pytest.raises(FormatError, match="empty"):
        read_jsonl(tmp_path / "e.jsonl")
    with pytest.raises(FormatError, match="cannot read"):
        read_jsonl(tmp_path / "nope.jsonl")


def test_canonical_rejects_nan():
    assert canonical({"b": 1, "a": [0.5]}) == '{"a":[0.5],"b":1}'
    with pytest.raises(ValueError):
        canonical({"x": float("nan")})


BASE = {"chain": "c.json", "mesh": "m.obj", "human": "h.jsonl"}


def test_config_paths_relative_to_file(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({**BASE, "contact": {"beta1": -5.0}}))
    cfg = load_config(tmp_path / "cfg.json")
    assert cfg.chain == tmp_path / "c.json" and cfg.contact.beta1 == -5.0
    assert cfg.scale_s == pytest.approx(10 / 9)
    with pytest.raises(ConfigError, match="chain file not found"):
        cfg.validate()


def test_config_rejects_unknown_and_invalid():
    with pytest.raises(ConfigError, match="unknown keys in retarget"):
        config_from_dict({**BASE, "retarget": {"lamda": 0.1}})
    with pytest.raises(ConfigError, match="refine.weights"):
        config_from_dict({**BASE, "refine": {"weights": {"w_dis": 2.0}}})
    with pytest.raises(ConfigError, match="missing required key 'mesh'"):
        config_from_dict({"chain": "c", "human": "h"})
    with pytest.raises(ConfigError):
        config_from_dict({**BASE, "scale_s": 0})
    with pytest.raises(ConfigError):
        config_from_dict({**BASE, "metrics": {"cd_mode": "both"}})
    with pytest.raises(ConfigError):
        config_from_dict({**BASE, "colour": "red"})


def test_config_bad_json(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text('{"chain": "c",\n "mesh": }')
    with pytest.raises(ConfigError, match=":2: invalid JSON"):
        load_config(p)


def test_config_digest():
    a = config_from_dict(BASE)
    assert a.digest() == config_from_dict(BASE, overrides={"output_dir": "elsewhere"}).digest()
    assert a.digest() != config_from_dict(BASE, overrides={"seed": 1}).digest()
    assert a.digest() != config_from_dict({**BASE, "refine": {"outer_rounds": 2}}).digest()
    assert config_from_dict(BASE, overrides={"seed": 4}).retarget.seed == 4
    json.dumps(a.snapshot())
