"""Deterministic synthetic fixtures: the synth3 hand, demo trajectories, contact traces.

Everything here is generated from closed-form descriptions and fixed seeds so
the bundled data files can be regenerated with ``scripts/make_fixtures.py``.
"""
from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .geometry import icosphere, query_points
from .hand_model import chain_from_dict, surface_points

DATA_DIR = Path(str(resources.files("handxfer") / "data"))

# (prefix, label, knuckle position in palm frame, yaw about palm z, radius, phalanx lengths)
_FINGERS = (
    ("th", "thumb", (0.038, 0.025, -0.008), -0.9, 0.010, (0.040, 0.030, 0.026)),
    ("ix", "index", (0.024, 0.092, 0.0), 0.0, 0.009, (0.045, 0.028, 0.024)),
    ("md", "middle", (-0.004, 0.096, 0.0), 0.0, 0.009, (0.050, 0.030, 0.025)),
)
FLEX_LIMITS = (-0.2, 1.6)
ABD_LIMITS = (-0.4, 0.4)


def _ring(y, r, n, phase=0.0):
    rows = []
    for k in range(n):
        phi = phase + 2 * np.pi * k / n
        c, s = np.cos(phi), np.sin(phi)
        rows.append([r * c, y, r * s, c, 0.0, s])
    return rows


def _tip_cap(y0, r):
    rows = []
    for k in range(7):
        phi = 2 * np.pi * k / 7
        n = np.array([np.cos(phi) * np.sin(np.pi / 4), np.cos(np.pi / 4), np.sin(phi) * np.sin(np.pi / 4)])
        rows.append([r * n[0], y0 + r * n[1], r * n[2], *n])
    rows.append([0.0, y0 + r, 0.0, 0.0, 1.0, 0.0])
    return rows


def _palm_samples():
    rows = []
    for x in np.linspace(-0.034, 0.034, 5):
        for y in np.linspace(0.012, 0.084, 4):
            rows.append([x, y, -0.01, 0.0, 0.0, -1.0])
    for x in np.linspace(-0.03, 0.03, 3):
        for y in np.linspace(0.02, 0.08, 4):
            rows.append([x, y, 0.01, 0.0, 0.0, 1.0])
    return rows


def _quat_z(yaw):
    return [float(np.cos(yaw / 2)), 0.0, 0.0, float(np.sin(yaw / 2))]


def synth3_dict():
    """Three-finger test hand (thumb, index, middle), padded to 28 DoF."""
    axes = [[1, 0, 0], [0, 1, 0], [0, 0, 1]]
    joints, links = [], [{"name": "world"}]
    parent = "world"
    for i, nm in enumerate(("tx", "ty", "tz", "rx", "ry", "rz")):
        prismatic = i < 3
        joints.append({
            "name": f"root_{nm}", "parent": parent, "axis": axes[i % 3],
            "kind": "prismatic" if prismatic else "revolute",
            "limits": [-5.0, 5.0] if prismatic else [-np.pi, np.pi], "rest": 0.0,
        })
        child = "palm" if nm == "rz" else f"root_{nm}_link"
        link = {"name": child, "parent_joint": f"root_{nm}"}
        if child == "palm":
            link.update(finger="palm", samples=_palm_samples())
        links.append(link)
        parent = child

    keypoints = [
        {"name": "palm_root", "link": "palm", "offset": [0.0, 0.0, 0.0]},
        {"name": "palm_edge_radial", "link": "palm", "offset": [0.04, 0.06, 0.0]},
        {"name": "palm_edge_ulnar", "link": "palm", "offset": [-0.04, 0.06, 0.0]},
        {"name": "palm_center", "link": "palm", "offset": [0.0, 0.05, 0.0]},
    ]
    for prefix, label, knuckle, yaw, r, (l1, l2, l3) in _FINGERS:
        joint_table = [
            (f"{prefix}_abd", "palm", [0, 0, 1], ABD_LIMITS, f"{prefix}_base", knuckle, _quat_z(yaw),
             _ring(0.0, r, 8, np.pi / 8)),
            (f"{prefix}_flex1", f"{prefix}_base", [-1, 0, 0], FLEX_LIMITS, f"{prefix}_prox",
             [0, 0, 0], None, _ring(l1 / 3, r, 8) + _ring(2 * l1 / 3, r, 8)),
            (f"{prefix}_flex2", f"{prefix}_prox", [-1, 0, 0], FLEX_LIMITS, f"{prefix}_mid",
             [0, l1, 0], None, _ring(l2 / 3, r, 6) + _ring(2 * l2 / 3, r, 6)),
            (f"{prefix}_flex3", f"{prefix}_mid", [-1, 0, 0], FLEX_LIMITS, f"{prefix}_dist",
             [0, l2, 0], None,
             _ring(0.2 * l3, r, 8) + _ring(0.5 * l3, r, 8) + _ring(0.8 * l3, r, 8) + _tip_cap(l3, r)),
        ]
        for jname, plink, axis, lim, child, trans, quat, samples in joint_table:
            joints.append({"name": jname, "parent": plink, "axis": axis, "kind": "revolute",
                           "limits": list(lim), "rest": 0.0})
            link = {"name": child, "parent_joint": jname, "translation": list(trans),
                    "finger": label, "samples": samples}
            if quat is not None:
                link["quat_wxyz"] = quat
            if child.endswith("_dist"):
                # marker on the pad side of the tip cap
                link["fingertip"] = [0.0, l3 + 0.7071 * r, -0.7071 * r]
            links.append(link)
        keypoints += [
            {"name": f"{label}_middle", "link": f"{prefix}_mid", "offset": [0.0, 0.0, 0.0]},
            {"name": f"{label}_distal", "link": f"{prefix}_dist", "offset": [0.0, 0.0, 0.0]},
            {"name": f"{label}_tip", "link": f"{prefix}_dist", "offset": [0.0, l3, 0.0]},
        ]
    return {"name": "synth3", "pad_to": 28, "joints": joints, "links": links,
            "keypoints": keypoints}


def synth3_chain():
    return chain_from_dict(synth3_dict())


def finger_dofs(chain, label):
    return chain.finger_dofs[label]


# --------------------------------------------------------------------------- trajectories

def smooth_joint_path(chain, n_frames=120, dt=1 / 30, seed=0, amplitude=0.25, freq=0.25):
    """Smooth joint trajectory: slow sinusoids around a mid-flexion pose."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_frames) * dt
    Q = np.zeros((n_frames, chain.n_dof))
    Q[:, :3] = np.array([0.02, -0.03, 0.25]) + 0.02 * np.sin(2 * np.pi * freq * t)[:, None] * np.array([1, 0.5, -0.5])
    Q[:, 3:6] = np.array([0.3, -0.2, 0.1]) + 0.1 * np.sin(2 * np.pi * freq * t + 1.0)[:, None] * np.array([1, -1, 0.5])
    for d in chain.articulated:
        lo, hi = chain.lower[d], chain.upper[d]
        if hi - lo < 1e-12:
            continue
        centre = lo + 0.35 * (hi - lo) if hi > 1.0 else 0.5 * (lo + hi)
        phase = rng.uniform(0, 2 * np.pi)
        f = freq * rng.uniform(0.7, 1.3)
        Q[:, d] = centre + amplitude * np.sin(2 * np.pi * f * t + phase)
    return np.clip(Q, chain.lower, chain.upper)


def human_frames_from_path(chain, Q, dt=1 / 30, noise=0.0, seed=0, scale=1.0):
    """Keypoint frames generated by the robot's own FK (divided by ``scale``)."""
    rng = np.random.default_rng(seed)
    K = chain.keypoints_batch(Q) / scale
    if noise:
        K = K + rng.normal(0.0, noise, K.shape)
    ts = np.arange(len(Q)) * dt
    return ts, K


# --------------------------------------------------------------------------- grasp scene

GRASP_CENTER = np.array([0.02, 0.06, -0.09])
GRASP_RADIUS = 0.045
CURL = np.array([0.8, 1.0, 0.8])      # relative flexion of the three finger joints
THUMB_ABD = 0.4


def curl_pose(chain, curls, thumb_abd=None):
    """Palm at the origin; each finger's flexion joints set to ``curl * CURL``."""
    thumb_abd = THUMB_ABD if thumb_abd is None else thumb_abd
    q = np.zeros(chain.n_dof)
    for f, s in curls.items():
        d = chain.finger_dofs[f]
        q[d[0]] = thumb_abd if f == "thumb" else 0.0
        q[d[1:]] = s * CURL
    return np.clip(q, chain.lower, chain.upper)


def _finger_depth(chain, q, finger, mesh):
    pts = surface_points(chain, q, finger).points
    return -float(np.min(query_points(mesh, pts).signed_distance))


def curl_for_depth(chain, finger, depth, mesh):
    """Curl at which ``finger``'s deepest sample sits ``depth`` inside ``mesh``."""
    f = lambda s: _finger_depth(chain, curl_pose(chain, {finger: s}), finger, mesh) - depth
    return float(brentq(f, 0.0, 1.2, xtol=1e-12))


def closing_sequence(chain, mesh, n_frames=60, depth=0.004, close_frames=36, start=0.45):
    """Hand closing on a static object, then holding with every finger ``depth`` inside it.

    Curls follow a smooth (cosine) ramp from ``start`` of their final value.
    """
    final = {f: curl_for_depth(chain, f, depth, mesh) for f in ("thumb", "index", "middle")}
    u = np.clip(np.arange(n_frames) / close_frames, 0.0, 1.0)
    w = start + (1 - start) * 0.5 * (1 - np.cos(np.pi * u))
    return np.array([curl_pose(chain, {f: s * wt for f, s in final.items()}) for wt in w])


def tremor_sequence(chain, mesh, n_frames=60, dt=1 / 30, depth=(0.0025, 0.004), freq=1.0):
    """Held grasp whose fingers squeeze and relax, penetrating between ``depth[0]`` and ``depth[1]``.

    The thumb starts at its deepest, so the sequence maximum is ``depth[1]``.
    """
    lo, hi = depth
    t = np.arange(n_frames) * dt
    phases = {"thumb": 0.0, "index": 0.7, "middle": 1.9}
    Q = []
    for ti in t:
        curls = {}
        for f, ph in phases.items():
            d = lo + (hi - lo) * 0.5 * (1 + np.cos(2 * np.pi * freq * ti - ph))
            curls[f] = curl_for_depth(chain, f, d, mesh)
        Q.append(curl_pose(chain, curls))
    return np.array(Q)


def grasp_mesh(subdivisions=2):
    return icosphere(GRASP_RADIUS, subdivisions, GRASP_CENTER)


def demo_joint_path(chain, mesh, n_frames=120, depth=0.003):
    """Approach, close and hold: the palm descends, then the fingers wrap the object."""
    final = {f: curl_for_depth(chain, f, depth, mesh) for f in ("thumb", "index", "middle")}
    t = np.arange(n_frames)
    ease = lambda u: 0.5 * (1 - np.cos(np.pi * np.clip(u, 0.0, 1.0)))
    descend = ease(t / 40)
    close = 0.3 + 0.7 * ease((t - 30) / 50)
    Q = np.array([curl_pose(chain, {f: s * w for f, s in final.items()}) for w in close])
    Q[:, 0] = 0.01 * (1 - descend)
    Q[:, 2] = 0.04 * (1 - descend)
    Q[:, 5] = 0.05 * (1 - descend)
    return Q


def noisy_contact_trace(n_frames=200, dt=1 / 30, seed=7, glitch_rate=0.06):
    """Synthetic fingertip positions/distances with single-frame sensing glitches.

    Each finger alternates contact segments (distance ~0.5 mm) and free segments
    (>= 8 mm). Glitches flip a single frame's distance across the thresholds.
    Two windows move fast (above 1.5 m/s); glitches there must survive imputation.
    Returns ``(timestamps, positions (T,5,3), distances (T,5), truth (T,5))``.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(n_frames) * dt
    pos = np.zeros((n_frames, 5, 3))
    dist = np.zeros((n_frames, 5))
    truth = np.zeros((n_frames, 5), dtype=bool)
    fast = np.zeros(n_frames, dtype=bool)
    fast[60:75] = True
    fast[140:150] = True
    # speed profile: slow drift, with fast sweeps in the windows above
    speed = np.where(fast, 2.5, 0.05)
    kernel = np.ones(5) / 5
    speed = np.convolve(np.pad(speed, 2, mode="edge"), kernel, mode="valid")
    for f in range(5):
        phase = rng.uniform(0, 2 * np.pi)
        direction = np.array([np.cos(phase), np.sin(phase), 0.3])
        direction /= np.linalg.norm(direction)
        path = np.cumsum(speed * dt)
        pos[:, f] = np.array([0.02 * f, 0.1, 0.0]) + path[:, None] * direction
        state, k = bool(rng.integers(2)), 0
        while k < n_frames:
            run = int(rng.integers(18, 45))
            truth[k:k + run, f] = state
            state = not state
            k += run
        dist[:, f] = np.where(truth[:, f], 0.0005 + 0.0003 * rng.random(n_frames),
                              0.008 + 0.01 * rng.random(n_frames))
        for g in np.flatnonzero(rng.random(n_frames) < glitch_rate):
            if 0 < g < n_frames - 1 and truth[g - 1, f] == truth[g, f] == truth[g + 1, f]:
                dist[g, f] = 0.009 if truth[g, f] else 0.001
    return t, pos, dist, truth


def write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=False) + "\n")


def icosphere_mesh(radius, center, subdivisions=3):
    return icosphere(radius, subdivisions, center)
