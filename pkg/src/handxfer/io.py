"""Line-delimited JSON files with a self-describing header line.

The first line of every file is a header object carrying ``format`` and
``config_digest``; every following line is one record. Serialisation is
canonical (sorted keys, shortest float repr), so identical content gives
identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    pass


def canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def digest_bytes(data):
    return hashlib.sha256(data).hexdigest()


def file_digest(path):
    return digest_bytes(Path(path).read_bytes())


def atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_jsonl(path, header, records):
    lines = [canonical(header)] + [canonical(r) for r in records]
    atomic_write(path, "\n".join(lines) + "\n")
    return file_digest(path)


def read_jsonl(path, kind=None):
    """Return ``(header, records)``; errors name the offending line."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from exc
    lines = text.splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file")
    out = []
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{i}: invalid JSON ({exc.msg})") from exc
        if not isinstance(obj, dict):
            raise FormatError(f"{path}:{i}: expected an object")
        out.append((i, obj))
    (_, header), records = out[0], out[1:]
    fmt = header.get("format")
    if kind is not None and fmt != f"handxfer/{kind}":
        raise FormatError(f"{path}:1: expected format handxfer/{kind}, found {fmt!r}")
    return header, records


def _field(path, lineno, rec, key, shape=None):
    if key not in rec:
        raise FormatError(f"{path}:{lineno}: missing field {key!r}")
    val = rec[key]
    if shape is None:
        return val
    try:
        arr = np.asarray(val, dtype=float)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}:{lineno}: field {key!r} is not numeric") from exc
    if arr.shape != shape:
        raise FormatError(f"{path}:{lineno}: field {key!r} has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}:{lineno}: field {key!r} is not finite")
    return arr


# ----------------------------------------------------------------------- human trajectories

def write_human(path, timestamps, keypoints, header_extra=None):
    header = {"format": "handxfer/human", "units": "m", "n_keypoints": int(keypoints.shape[1])}
    header.update(header_extra or {})
    recs = [{"t": float(t), "keypoints": np.asarray(k, dtype=float).tolist()}
            for t, k in zip(timestamps, keypoints)]
    return write_jsonl(path, header, recs)


def read_human(path, n_keypoints=None):
    header, recs = read_jsonl(path, "human")
    n = n_keypoints or header.get("n_keypoints")
    ts, ks = [], []
    for lineno, r in recs:
        t = float(_field(path, lineno, r, "t"))
        k = _field(path, lineno, r, "keypoints", (n, 3) if n else None)
        k = np.asarray(k, dtype=float)
        if ts and t <= ts[-1]:
            raise FormatError(f"{path}:{lineno}: timestamps must increase")
        ts.append(t)
        ks.append(k)
    if not ts:
        raise FormatError(f"{path}: no frames")
    return header, np.array(ts), np.array(ks)


# ---------------------------------------------------------------------- joint sequences

def write_joints(path, kind, header, timestamps, Q, extra=None):
    header = {"format": f"handxfer/{kind}", **header}
    recs = []
    for i, (t, q) in enumerate(zip(timestamps, Q)):
        rec = {"frame": i, "t": float(t), "q": np.asarray(q, dtype=float).tolist()}
        if extra is not None:
            rec.update(extra[i])
        recs.append(rec)
    return write_jsonl(path, header, recs)


def read_joints(path, kind, n_dof=None):
    header, recs = read_jsonl(path, kind)
    ts, Q, extra = [], [], []
    for lineno, r in recs:
        ts.append(float(_field(path, lineno, r, "t")))
        Q.append(_field(path, lineno, r, "q", (n_dof,) if n_dof else None))
        extra.append({k: v for k, v in r.items() if k not in ("t", "q", "frame")})
    if not ts:
        raise FormatError(f"{path}: no frames")
    return header, np.array(ts), np.array(Q, dtype=float), extra


# ------------------------------------------------------------------------------- contacts

def write_contacts(path, header, timestamps, timeline):
    recs = []
    for i, t in enumerate(timestamps):
        recs.append({
            "frame": i, "t": float(t),
            "raw": [bool(x) for x in timeline.raw[i]],
            "states": [bool(x) for x in timeline.states[i]],
            "map": timeline.maps[i].to_json(),
        })
    return write_jsonl(path, {"format": "handxfer/contacts", **header}, recs)


def read_contacts(path):
    from .contact import ContactMap
    header, recs = read_jsonl(path, "contacts")
    raw, states, maps, ts = [], [], [], []
    for lineno, r in recs:
        ts.append(float(_field(path, lineno, r, "t")))
        for key, dst in (("raw", raw), ("states", states)):
            v = _field(path, lineno, r, key)
            if not (isinstance(v, list) and len(v) == 5 and all(isinstance(b, bool) for b in v)):
                raise FormatError(f"{path}:{lineno}: field {key!r} must be 5 booleans")
            dst.append(v)
        m = _field(path, lineno, r, "map")
        try:
            maps.append(ContactMap.from_json(m))
        except (TypeError, ValueError, AttributeError) as exc:
            raise FormatError(f"{path}:{lineno}: malformed contact map") from exc
    if not ts:
        raise FormatError(f"{path}: no frames")
    return header, np.array(ts), np.array(raw, dtype=bool), np.array(states, dtype=bool), maps
