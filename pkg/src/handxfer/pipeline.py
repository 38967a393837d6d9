"""End-to-end orchestration: retarget -> contact -> refine -> metrics.

Every stage reads its inputs from files, checks that upstream headers were
produced by the same configuration (and from the exact upstream bytes), and
writes a line-delimited output plus an updated ``manifest.json``.
"""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from . import __version__
from .contact import extract_contacts
from .geometry import load_mesh, scale_mesh
from .hand_model import FINGERS, load_chain
from .io import (FormatError, atomic_write, canonical, file_digest, read_contacts, read_human,
                 read_joints, write_contacts, write_joints)
from .metrics import CD_MODES, compute_report
from .refine import sequential_refine
from .retarget import HumanFrame, retarget_sequence

log = logging.getLogger(__name__)

FILES = {"retarget": "retargeted.jsonl", "contact": "contacts.jsonl",
         "refine": "refined.jsonl", "metrics": "metrics.json"}


class StageInputError(ValueError):
    """An input file is inconsistent with the configuration or with its upstream."""


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"{stage} stage failed: {exc}")
        self.stage = stage


def _out(cfg, stage):
    return Path(cfg.output_dir) / FILES[stage]


def _check(header, key, expected, path, force):
    found = header.get(key)
    if found != expected:
        msg = f"{path}: {key} is {found!r}, expected {expected!r}"
        if not force:
            raise StageInputError(msg + " (rerun the upstream stage or pass --force)")
        log.warning("%s; continuing because of --force", msg)


# -------------------------------------------------------------------------------- inputs

def load_inputs(cfg):
    """Chain, scaled mesh and scaled human frames. Scaling by ``scale_s`` happens here only."""
    cfg.validate()
    chain = load_chain(cfg.chain)
    mesh = scale_mesh(load_mesh(cfg.mesh), cfg.scale_s)
    _, ts, K = read_human(cfg.human, chain.n_keypoints)
    return chain, mesh, ts, K * cfg.scale_s


def _manifest_update(cfg, stage, wall, outputs):
    path = Path(cfg.output_dir) / "manifest.json"
    digest = cfg.digest()
    man = None
    if path.exists():
        try:
            man = json.loads(path.read_text())
        except json.JSONDecodeError:
            man = None
    if not man or man.get("config_digest") != digest:
        man = {
            "tool": "handxfer", "version": __version__,
            "config": cfg.snapshot(), "config_digest": digest,
            "inputs": {k: {"path": str(getattr(cfg, k)), "sha256": file_digest(getattr(cfg, k))}
                       for k in ("chain", "mesh", "human")},
            "stages": {},
        }
    man["stages"][stage] = {"wall_time_s": round(wall, 3),
                            "outputs": {Path(p).name: file_digest(p) for p in outputs}}
    atomic_write(path, json.dumps(man, indent=1, sort_keys=True) + "\n")
    return path


# -------------------------------------------------------------------------------- stages

def cmd_retarget(cfg, force=False):
    t0 = time.perf_counter()
    chain, mesh, ts, K = load_inputs(cfg)
    frames = [HumanFrame(t, k) for t, k in zip(ts, K)]
    log.info("retargeting %d frames (budget %d per frame)", len(frames), cfg.retarget.search_budget)
    try:
        res = retarget_sequence(chain, frames, cfg.retarget,
                                on_frame=lambda t, q, v: log.debug("frame %d objective %.3e", t, v))
    except Exception as exc:
        raise StageError("retarget", exc) from exc
    out = _out(cfg, "retarget")
    header = {"config_digest": cfg.digest(), "human_sha256": file_digest(cfg.human),
              "chain": chain.name, "n_dof": chain.n_dof}
    extra = [{"objective": float(v), "evaluations": int(e)}
             for v, e in zip(res.objective, res.evaluations)]
    write_joints(out, "retargeted", header, ts, res.q, extra)
    _manifest_update(cfg, "retarget", time.perf_counter() - t0, [out])
    return out


def _read_retargeted(cfg, chain, n_frames, path, force):
    header, ts, Q, _ = read_joints(path, "retargeted", chain.n_dof)
    _check(header, "config_digest", cfg.digest(), path, force)
    if len(Q) != n_frames:
        raise StageInputError(f"{path}: {len(Q)} frames, human trajectory has {n_frames}")
    return ts, Q


def cmd_contact(cfg, retargeted=None, force=False):
    t0 = time.perf_counter()
    chain, mesh, ts_h, _ = load_inputs(cfg)
    retargeted = Path(retargeted or _out(cfg, "retarget"))
    ts, Q = _read_retargeted(cfg, chain, len(ts_h), retargeted, force)
    try:
        tl = extract_contacts(chain, Q, mesh, ts, cfg.contact)
    except Exception as exc:
        raise StageError("contact", exc) from exc
    log.info("contact frames per finger: %s", dict(zip(FINGERS, tl.states.sum(axis=0).tolist())))
    out = _out(cfg, "contact")
    header = {"config_digest": cfg.digest(), "retargeted_sha256": file_digest(retargeted)}
    write_contacts(out, header, ts, tl)
    _manifest_update(cfg, "contact", time.perf_counter() - t0, [out])
    return out


def cmd_refine(cfg, retargeted=None, contacts=None, force=False, jobs=1):
    t0 = time.perf_counter()
    chain, mesh, ts_h, _ = load_inputs(cfg)
    retargeted = Path(retargeted or _out(cfg, "retarget"))
    contacts = Path(contacts or _out(cfg, "contact"))
    ts, Q = _read_retargeted(cfg, chain, len(ts_h), retargeted, force)
    header, _, _, states, maps = read_contacts(contacts)
    _check(header, "config_digest", cfg.digest(), contacts, force)
    _check(header, "retargeted_sha256", file_digest(retargeted), contacts, force)
    if len(maps) != len(Q):
        raise StageInputError(f"{contacts}: {len(maps)} frames, retargeted sequence has {len(Q)}")
    try:
        res = sequential_refine(chain, Q, maps, mesh, cfg.refine, jobs=jobs)
    except Exception as exc:
        raise StageError("refine", exc) from exc
    extra = []
    for fr in res.frames:
        last = {}
        for v in fr.fingers:
            last[v["finger"]] = v["terms"]
        extra.append({"rounds": fr.rounds, "energy": fr.energy, "fingers": last,
                      "visits": [{"round": v["round"], "finger": v["finger"], "trace": v["trace"]}
                                 for v in fr.fingers]})
    out = _out(cfg, "refine")
    w = cfg.refine.weights
    header = {"config_digest": cfg.digest(), "retargeted_sha256": file_digest(retargeted),
              "contacts_sha256": file_digest(contacts),
              "weights": {"w_dis": 1.0, "w_pen": w.w_pen, "w_align": w.w_align,
                          "w_spen": w.w_spen, "w_joints": w.w_joints},
              "finger_order": list(cfg.refine.finger_order)}
    write_joints(out, "refined", header, ts, res.q, extra)
    _manifest_update(cfg, "refine", time.perf_counter() - t0, [out])
    return out


def cmd_metrics(cfg, retargeted=None, refined=None, contacts=None, force=False, cd_mode=None):
    """Score retargeted (and refined, when present) sequences against the human keypoints."""
    t0 = time.perf_counter()
    chain, mesh, ts_h, K = load_inputs(cfg)
    cd_mode = cd_mode or cfg.metrics.cd_mode
    if cd_mode not in CD_MODES:
        raise StageInputError(f"unknown cd mode {cd_mode!r}")
    seqs = {}
    retargeted = Path(retargeted or _out(cfg, "retarget"))
    _, seqs["retargeted"] = _read_retargeted(cfg, chain, len(ts_h), retargeted, force)
    refined = Path(refined) if refined else _out(cfg, "refine")
    if refined.exists():
        header, _, Qr, _ = read_joints(refined, "refined", chain.n_dof)
        _check(header, "config_digest", cfg.digest(), refined, force)
        if len(Qr) != len(ts_h):
            raise StageInputError(f"{refined}: {len(Qr)} frames, human trajectory has {len(ts_h)}")
        seqs["refined"] = Qr
    contacts = Path(contacts) if contacts else _out(cfg, "contact")
    states = None
    if contacts.exists():
        header, _, _, states, _ = read_contacts(contacts)
        _check(header, "config_digest", cfg.digest(), contacts, force)
    dt = float(np.median(np.diff(ts_h))) if len(ts_h) > 1 else cfg.retarget.dt
    reports = {}
    for name, Q in seqs.items():
        try:
            rep = compute_report(chain, K, Q, mesh, states, dt=dt, bins=cfg.metrics.bins,
                                 acc_space=cfg.metrics.acc_space)
        except Exception as exc:
            raise StageError("metrics", exc) from exc
        d = rep.to_dict()
        d["cd_selected"] = {"mode": cd_mode, "value": rep.cd[cd_mode]}
        reports[name] = d
        log.info("%s: cd[%s]=%.3e max_pen=%.3e rms_acc=%.3f", name, cd_mode, rep.cd[cd_mode],
                 rep.max_penetration, rep.rms_acc)
    out = _out(cfg, "metrics")
    doc = {"format": "handxfer/metrics", "config_digest": cfg.digest(), "cd_mode": cd_mode,
           "inputs": {p.name: file_digest(p) for p in (retargeted, refined, contacts) if p.exists()},
           "reports": reports}
    atomic_write(out, json.dumps(json.loads(canonical(doc)), indent=1, sort_keys=True) + "\n")
    _manifest_update(cfg, "metrics", time.perf_counter() - t0, [out])
    return out


def cmd_run_all(cfg, force=False, jobs=1, cd_mode=None):
    outs = {"retarget": cmd_retarget(cfg, force)}
    outs["contact"] = cmd_contact(cfg, outs["retarget"], force)
    outs["refine"] = cmd_refine(cfg, outs["retarget"], outs["contact"], force, jobs)
    outs["metrics"] = cmd_metrics(cfg, outs["retarget"], outs["refine"], outs["contact"], force,
                                  cd_mode)
    outs["manifest"] = Path(cfg.output_dir) / "manifest.json"
    return outs


def validate(cfg):
    """Parse every input without running any stage; returns a short summary."""
    chain, mesh, ts, K = load_inputs(cfg)
    if np.any(np.diff(ts) <= 0):
        raise FormatError(f"{cfg.human}: timestamps must increase")
    return {"chain": chain.name, "n_dof": chain.n_dof, "n_keypoints": chain.n_keypoints,
            "frames": int(len(ts)), "mesh": mesh.stats(), "config_digest": cfg.digest()}
