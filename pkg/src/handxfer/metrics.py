"""Trajectory quality metrics: time-aligned Chamfer, velocity KL, RMS acceleration,
penetration depth and contact distance."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .geometry import query_points
from .hand_model import fingertip_positions, surface_points

CD_MODES = ("literal", "bidirectional")


def _frame_chamfer(P, G, mode):
    P = np.asarray(P, dtype=float)
    G = np.asarray(G, dtype=float)
    if len(P) == 0 or len(G) == 0:
        raise ValueError("point clouds must be nonempty")
    D = cdist(P, G)
    if mode == "literal":
        return float(D.min())
    if mode == "bidirectional":
        return 0.5 * (float(D.min(axis=1).mean()) + float(D.min(axis=0).mean()))
    raise ValueError(f"unknown chamfer mode {mode!r}")


def chamfer_series(ref_seq, gen_seq, mode="bidirectional"):
    if len(ref_seq) != len(gen_seq):
        raise ValueError(f"frame count mismatch: {len(ref_seq)} vs {len(gen_seq)}")
    if len(ref_seq) == 0:
        raise ValueError("empty sequence")
    return np.array([_frame_chamfer(p, g, mode) for p, g in zip(ref_seq, gen_seq)])


def chamfer_over_time(ref_seq, gen_seq, mode="bidirectional"):
    """Per-frame cloud distance averaged over time.

    ``literal`` takes the single closest pair per frame; ``bidirectional`` is
    the symmetric mean nearest-neighbour distance.
    """
    return float(chamfer_series(ref_seq, gen_seq, mode).mean())


def keypoint_speeds(seq, dt):
    seq = np.asarray(seq, dtype=float)
    if len(seq) < 2:
        raise ValueError("need at least 2 frames")
    return np.linalg.norm(np.diff(seq, axis=0), axis=-1).reshape(-1) / dt


def velocity_kl(ref_seq, gen_seq, bins=50, dt=1 / 30, vrange=(0.0, 2.0), eps=1e-9):
    """KL(ref || gen) between histograms of keypoint speeds."""
    sr = keypoint_speeds(ref_seq, dt)
    sg = keypoint_speeds(gen_seq, dt)
    hr, _ = np.histogram(np.clip(sr, *vrange), bins=bins, range=vrange)
    hg, _ = np.histogram(np.clip(sg, *vrange), bins=bins, range=vrange)
    p = hr / hr.sum() + eps
    q = hg / hg.sum() + eps
    p /= p.sum()
    q /= q.sum()
    return float(max(np.sum(p * np.log(p / q)), 0.0))


def acceleration_series(seq, dt):
    seq = np.asarray(seq, dtype=float)
    if len(seq) < 3:
        raise ValueError("need at least 3 frames")
    acc = (seq[2:] - 2 * seq[1:-1] + seq[:-2]) / dt ** 2
    return np.linalg.norm(acc.reshape(len(acc), -1), axis=1)


def rms_acceleration(seq, dt=1 / 30):
    """Root mean square of the second-difference acceleration magnitude per frame."""
    a = acceleration_series(seq, dt)
    return float(np.sqrt(np.mean(a * a)))


def penetration_series(chain, Q, mesh):
    """Deepest penetration per frame over all hand surface samples."""
    out = np.zeros(len(Q))
    for t, q in enumerate(np.atleast_2d(Q)):
        sd = query_points(mesh, surface_points(chain, q).points).signed_distance
        out[t] = max(0.0, -float(sd.min()))
    return out


def contact_distance_series(chain, Q, mesh, states):
    """Mean fingertip-to-surface distance over in-contact fingers (NaN without contact)."""
    Q = np.atleast_2d(Q)
    states = np.asarray(states, dtype=bool)
    if len(states) != len(Q):
        raise ValueError("contact states and sequence differ in length")
    tips = fingertip_positions(chain, Q)
    out = np.full(len(Q), np.nan)
    for t in range(len(Q)):
        sel = states[t] & ~np.isnan(tips[t, :, 0])
        if np.any(sel):
            out[t] = float(query_points(mesh, tips[t, sel]).distance.mean())
    return out


def penetration_and_contact(chain, Q, mesh, states=None):
    """``(max_penetration, mean_contact_distance)``; the latter is ``None`` without contacts."""
    Q = np.atleast_2d(Q)
    if len(Q) == 0:
        raise ValueError("empty sequence")
    pen = penetration_series(chain, Q, mesh)
    if states is None:
        return float(pen.max()), None
    cd = contact_distance_series(chain, Q, mesh, states)
    have = ~np.isnan(cd)
    return float(pen.max()), (float(cd[have].mean()) if np.any(have) else None)


@dataclass
class MetricsReport:
    cd: dict                       # mode -> value
    velocity_kl: float
    rms_acc: float
    rms_acc_space: str             # "joint" (rad/s^2) or "keypoint" (m/s^2)
    max_penetration: float
    mean_contact_distance: float | None
    cd_source: str = "hand_keypoints"
    series: dict = field(default_factory=dict)

    def to_dict(self, with_series=False):
        d = asdict(self)
        if not with_series:
            d.pop("series")
        else:
            d["series"] = {k: [None if np.isnan(x) else float(x) for x in v]
                           for k, v in self.series.items()}
        return d


def compute_report(chain, ref_keypoints, Q, mesh, states=None, dt=1 / 30, cd_modes=CD_MODES,
                   bins=50, acc_space="joint"):
    """Score a joint sequence ``Q`` against reference keypoint trajectories."""
    gen = chain.keypoints_batch(np.atleast_2d(Q))
    ref = np.asarray(ref_keypoints, dtype=float)
    cd = {m: chamfer_over_time(ref, gen, m) for m in cd_modes}
    if acc_space == "joint":
        rms = rms_acceleration(Q, dt)
        acc = acceleration_series(Q, dt)
    elif acc_space == "keypoint":
        rms = rms_acceleration(gen, dt)
        acc = acceleration_series(gen, dt)
    else:
        raise ValueError("acc_space must be 'joint' or 'keypoint'")
    pen = penetration_series(chain, Q, mesh)
    series = {"penetration": pen, "acceleration": acc,
              **{f"cd_{m}": chamfer_series(ref, gen, m) for m in cd_modes}}
    mcd = None
    if states is not None:
        cds = contact_distance_series(chain, Q, mesh, states)
        series["contact_distance"] = cds
        have = ~np.isnan(cds)
        mcd = float(cds[have].mean()) if np.any(have) else None
    return MetricsReport(cd, velocity_kl(ref, gen, bins, dt), rms, acc_space,
                         float(pen.max()), mcd, series=series)
