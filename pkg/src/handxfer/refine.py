"""Stage 3: per-finger grasp refinement.

For each frame with contacts, fingers are visited in a fixed order and only
the active finger's joints move. Each visit minimises

    E = E_dis + w_pen E_pen + w_align E_align + w_spen E_spen + w_joints E_joints

by projected gradient descent with a Gauss-Newton metric. Gradients are
analytic (chain rule through the FK point/normal Jacobians);
``check_gradients`` compares them with central differences.

Lengths are in meters, so the default weights are chosen to make a
millimetre of penetration cost about as much as a few hundredths of a
radian of joint deviation.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .contact import ContactMap
from .geometry import query_points
from .hand_model import FINGERS, N_DUMMY, normal_jacobian, point_jacobian
from .optim import projected_gradient_descent

log = logging.getLogger(__name__)

TERMS = ("dis", "pen", "align", "spen", "joints")


@dataclass
class EnergyWeights:
    w_pen: float = 1e4
    w_align: float = 1e-3
    w_spen: float = 10.0
    w_joints: float = 0.1

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative")

    def as_dict(self):
        return {"dis": 1.0, "pen": self.w_pen, "align": self.w_align,
                "spen": self.w_spen, "joints": self.w_joints}


@dataclass
class RefineConfig:
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    delta_spen: float = 0.002
    pen_clearance: float = 0.0
    finger_order: tuple = FINGERS
    max_iters_per_finger: int = 100
    step_tol: float = 1e-9
    outer_rounds: int = 3
    convergence_tol: float = 1e-6
    facing_normals: bool = True
    reproject_anchors: bool = False
    anchor_mode: str = "onset"   # or "per_frame"
    gauss_newton: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = EnergyWeights(**self.weights)
        self.finger_order = tuple(self.finger_order)
        if sorted(self.finger_order) != sorted(FINGERS):
            raise ValueError("finger_order must be a permutation of the five fingers")
        if self.delta_spen <= 0 or self.step_tol <= 0 or self.convergence_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.anchor_mode not in ("onset", "per_frame"):
            raise ValueError("anchor_mode must be 'onset' or 'per_frame'")


@dataclass
class FingerTargets:
    hand_idx: np.ndarray       # (k,) indices into the chain's surface samples
    anchors: np.ndarray        # (k, 3) object points
    anchor_normals: np.ndarray  # (k, 3) outward object normals

    def __len__(self):
        return len(self.hand_idx)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, dtype=int), np.zeros((0, 3)), np.zeros((0, 3)))


def targets_from_map(cmap, mesh):
    out = {}
    for f in FINGERS:
        pairs = cmap[f]
        if not pairs:
            out[f] = FingerTargets.empty()
            continue
        h = np.array([p[0] for p in pairs], dtype=int)
        v = np.array([p[1] for p in pairs], dtype=int)
        out[f] = FingerTargets(h, mesh.vertices[v].copy(), mesh.vertex_normals[v].copy())
    return out


class _Frame:
    """FK-derived quantities for one configuration."""

    def __init__(self, chain, q):
        R, p = chain.fk_batch(np.asarray(q, dtype=float)[None], clamp=False)
        self.R, self.p = R[0], p[0]
        links = chain.sample_link
        self.points = np.einsum("kij,kj->ki", self.R[links], chain.sample_local) + self.p[links]
        self.normals = np.einsum("kij,kj->ki", self.R[links], chain.normal_local)
        self.chain = chain

    def jac(self, idx, dofs):
        return point_jacobian(self.chain, self.R, self.p, self.chain.sample_link[idx],
                              self.points[idx], dofs)

    def njac(self, idx, dofs):
        return normal_jacobian(self.chain, self.R, self.p, self.chain.sample_link[idx],
                               self.normals[idx], dofs)


def _zero(k):
    return 0.0, np.zeros(k), np.zeros((k, k))


# Each term returns (value, gradient, Gauss-Newton curvature) w.r.t. q[dofs].

def _e_dis(fr, targets, dofs):
    k = len(dofs)
    if len(targets) == 0:
        return _zero(k)
    diff = fr.points[targets.hand_idx] - targets.anchors
    val = float(np.sum(diff * diff))
    if k == 0:
        return val, np.zeros(0), np.zeros((0, 0))
    J = fr.jac(targets.hand_idx, dofs)
    return val, 2.0 * np.einsum("ki,kid->d", diff, J), 2.0 * np.einsum("kid,kie->de", J, J)


def _e_pen(fr, mesh, idx, clearance, dofs):
    k = len(dofs)
    if len(idx) == 0:
        return _zero(k)
    res = query_points(mesh, fr.points[idx])
    pen = np.maximum(0.0, clearance - res.signed_distance)
    val = float(np.sum(pen * pen))
    act = pen > 0
    if not np.any(act) or k == 0:
        return val, np.zeros(k), np.zeros((k, k))
    # d pen / dq = -grad(sd) . J
    Jr = -np.einsum("ki,kid->kd", res.gradient[act], fr.jac(idx[act], dofs))
    return val, 2.0 * pen[act] @ Jr, 2.0 * Jr.T @ Jr


def _e_align(fr, targets, facing, dofs):
    k = len(dofs)
    if len(targets) == 0:
        return _zero(k)
    n = fr.normals[targets.hand_idx]
    nO = -targets.anchor_normals if facing else targets.anchor_normals
    e = 1.0 - np.sum(n * nO, axis=1)
    val = float(np.sum(e * e))
    if k == 0:
        return val, np.zeros(0), np.zeros((0, 0))
    Je = -np.einsum("ki,kid->kd", nO, fr.njac(targets.hand_idx, dofs))
    return val, 2.0 * e @ Je, 2.0 * Je.T @ Je


def _e_spen(fr, chain, finger, delta, dofs):
    k = len(dofs)
    act = chain.sample_indices(finger)
    oth = np.flatnonzero(chain.sample_finger != finger)
    if len(act) == 0 or len(oth) == 0:
        return _zero(k)
    diff = fr.points[act][:, None, :] - fr.points[oth][None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=2))
    h = np.maximum(delta - d, 0.0)
    val = float(np.sum(h))
    g = np.zeros(k)
    ia, io = np.nonzero(h > 0)
    if len(ia) and k:
        u = diff[ia, io] / np.maximum(d[ia, io], 1e-300)[:, None]
        Ja = fr.jac(act[np.unique(ia)], dofs)
        Jo = fr.jac(oth[np.unique(io)], dofs)
        Ja = Ja[np.searchsorted(np.unique(ia), ia)]
        Jo = Jo[np.searchsorted(np.unique(io), io)]
        g = -np.einsum("ki,kid->d", u, Ja - Jo)
    # a linear hinge has no curvature away from its kink
    return val, g, np.zeros((k, k))


def _e_joints(q, q_init, dofs):
    dofs = np.asarray(dofs, dtype=int)
    art = np.arange(N_DUMMY, len(q))
    diff = np.asarray(q)[art] - np.asarray(q_init)[art]
    val = float(diff @ diff)
    full = np.zeros(len(q))
    full[art] = 2.0 * diff
    mask = np.zeros(len(q))
    mask[art] = 2.0
    return val, full[dofs], np.diag(mask[dofs])


def energy_terms(chain, q, mesh, finger, targets, cfg, q_init, dofs=(), pen_idx=None):
    """Every energy term as ``(value, gradient, curvature)`` w.r.t. ``q[dofs]``.

    ``curvature`` is the Gauss-Newton matrix of the squared terms (zero for
    the linear self-penetration hinge).
    """
    dofs = np.asarray(dofs, dtype=int)
    fr = _Frame(chain, q)
    if pen_idx is None:
        pen_idx = np.arange(len(chain.sample_local))
    return {
        "dis": _e_dis(fr, targets, dofs),
        "pen": _e_pen(fr, mesh, pen_idx, cfg.pen_clearance, dofs),
        "align": _e_align(fr, targets, cfg.facing_normals, dofs),
        "spen": _e_spen(fr, chain, finger, cfg.delta_spen, dofs),
        "joints": _e_joints(q, q_init, dofs),
    }


def total_energy(terms, weights):
    w = weights.as_dict()
    return sum(w[k] * terms[k][0] for k in TERMS)


# ----------------------------------------------------------------- scalar convenience API

def e_dis(chain, q, targets):
    return _e_dis(_Frame(chain, q), targets, np.zeros(0, dtype=int))[0]


def e_pen(chain, q, mesh, cfg):
    idx = np.arange(len(chain.sample_local))
    return _e_pen(_Frame(chain, q), mesh, idx, cfg.pen_clearance, np.zeros(0, dtype=int))[0]


def e_align(chain, q, targets, facing=True):
    return _e_align(_Frame(chain, q), targets, facing, np.zeros(0, dtype=int))[0]


def e_spen(chain, q, active_finger, cfg):
    return _e_spen(_Frame(chain, q), chain, active_finger, cfg.delta_spen, np.zeros(0, dtype=int))[0]


def e_joints(q, q_init):
    q, q_init = np.asarray(q), np.asarray(q_init)
    if q.shape != q_init.shape:
        raise ValueError("dimension mismatch")
    return _e_joints(q, q_init, np.zeros(0, dtype=int))[0]


def check_gradients(chain, q, mesh, finger, targets, cfg, q_init, dofs, h=1e-5):
    """Relative error between analytic and central-difference gradients, per term."""
    dofs = np.asarray(dofs, dtype=int)
    base = energy_terms(chain, q, mesh, finger, targets, cfg, q_init, dofs)
    fd = {k: np.zeros(len(dofs)) for k in TERMS}
    for j, d in enumerate(dofs):
        qp, qm = np.array(q, dtype=float), np.array(q, dtype=float)
        qp[d] += h
        qm[d] -= h
        ep = energy_terms(chain, qp, mesh, finger, targets, cfg, q_init)
        em = energy_terms(chain, qm, mesh, finger, targets, cfg, q_init)
        for k in TERMS:
            fd[k][j] = (ep[k][0] - em[k][0]) / (2 * h)
    out = {}
    for k in TERMS:
        g = base[k][1]
        scale = max(np.linalg.norm(fd[k]), np.linalg.norm(g))
        out[k] = 0.0 if scale == 0 else float(np.linalg.norm(g - fd[k]) / scale)
    return out, base, fd


# --------------------------------------------------------------------------- optimisation

@dataclass
class FingerResult:
    q: np.ndarray
    trace: list
    terms: dict


def optimize_finger(chain, q, finger, targets, mesh, cfg, q_init=None):
    """Minimise the total energy over ``finger``'s joints only; other DoF are untouched."""
    q = np.array(q, dtype=float)
    q_init = q.copy() if q_init is None else np.asarray(q_init, dtype=float)
    dofs = chain.finger_dofs[finger]
    dofs = dofs[chain.upper[dofs] > chain.lower[dofs]]
    weights = cfg.weights.as_dict()
    moving = chain.sample_indices(finger)
    static = np.flatnonzero(chain.sample_finger != finger)
    # penetration of points this finger cannot move is a constant offset
    static_pen = _e_pen(_Frame(chain, q), mesh, static, cfg.pen_clearance, np.zeros(0, dtype=int))[0]

    def fun_grad(x):
        qq = q.copy()
        qq[dofs] = x
        terms = energy_terms(chain, qq, mesh, finger, targets, cfg, q_init, dofs, pen_idx=moving)
        val = sum(weights[k] * terms[k][0] for k in TERMS) + weights["pen"] * static_pen
        grad = sum(weights[k] * terms[k][1] for k in TERMS)
        curv = sum(weights[k] * terms[k][2] for k in TERMS)
        if not np.isfinite(val):
            bad = [k for k in TERMS if not np.isfinite(terms[k][0])]
            raise FloatingPointError(f"non-finite energy in terms {bad} for finger {finger}")
        return (val, grad, curv) if cfg.gauss_newton else (val, grad)

    if len(dofs) == 0:
        return FingerResult(q, [], {})
    res = projected_gradient_descent(fun_grad, q[dofs], chain.lower[dofs], chain.upper[dofs],
                                     max_iter=cfg.max_iters_per_finger, step_tol=cfg.step_tol)
    out = q.copy()
    out[dofs] = res.x
    terms = energy_terms(chain, out, mesh, finger, targets, cfg, q_init)
    return FingerResult(out, res.trace, {k: v[0] for k, v in terms.items()})


def frame_energy(chain, q, mesh, targets, cfg, q_init):
    """Total energy of a frame: all contact targets, all fingers' self-penetration."""
    fr = _Frame(chain, q)
    none = np.zeros(0, dtype=int)
    w = cfg.weights.as_dict()
    total = w["pen"] * _e_pen(fr, mesh, np.arange(len(chain.sample_local)), cfg.pen_clearance, none)[0]
    total += w["joints"] * _e_joints(q, q_init, none)[0]
    for f, t in targets.items():
        if len(t) == 0:
            continue
        total += _e_dis(fr, t, none)[0] + w["align"] * _e_align(fr, t, cfg.facing_normals, none)[0]
        total += w["spen"] * _e_spen(fr, chain, f, cfg.delta_spen, none)[0]
    return total


def _reproject(targets, chain, q, mesh):
    fr = _Frame(chain, q)
    out = {}
    for f, t in targets.items():
        if len(t) == 0:
            out[f] = t
            continue
        res = query_points(mesh, fr.points[t.hand_idx])
        out[f] = FingerTargets(t.hand_idx, res.closest, mesh.vertex_normals[res.vertex_index])
    return out


@dataclass
class FrameRefinement:
    q: np.ndarray
    rounds: int
    energy: list                                   # frame energy after each round
    fingers: list = field(default_factory=list)    # per-visit records


def refine_frame(chain, q, cmap, mesh, cfg):
    q_init = np.array(q, dtype=float)
    targets = targets_from_map(cmap, mesh)
    if all(len(t) == 0 for t in targets.values()):
        return FrameRefinement(q_init.copy(), 0, [])
    qc = q_init.copy()
    energy = [frame_energy(chain, qc, mesh, targets, cfg, q_init)]
    visits = []
    rounds = 0
    for rnd in range(cfg.outer_rounds):
        rounds = rnd + 1
        if cfg.reproject_anchors and rnd > 0:
            targets = _reproject(targets, chain, qc, mesh)
        for f in cfg.finger_order:
            if len(targets[f]) == 0:
                continue
            res = optimize_finger(chain, qc, f, targets[f], mesh, cfg, q_init)
            qc = res.q
            visits.append({"round": rnd, "finger": f, "trace": res.trace, "terms": res.terms})
        energy.append(frame_energy(chain, qc, mesh, targets, cfg, q_init))
        prev, cur = energy[-2], energy[-1]
        if prev - cur < cfg.convergence_tol * max(abs(prev), 1e-300):
            break
    return FrameRefinement(qc, rounds, energy, visits)


@dataclass
class RefineResult:
    q: np.ndarray
    frames: list   # FrameRefinement per frame


def _refine_one(args):
    chain, q, cmap, mesh, cfg = args
    return refine_frame(chain, q, cmap, mesh, cfg)


def hold_contact_maps(maps):
    """Within each finger's run of contact frames, reuse the correspondences of the first frame.

    A static object grasped by a static finger keeps touching the same
    surface patch; re-deriving the patch every frame makes the target set
    flicker as points drift across the contact shell.
    """
    out = [ContactMap({f: list(m[f]) for f in FINGERS}) for m in maps]
    for f in FINGERS:
        for t in range(1, len(out)):
            if out[t][f] and out[t - 1][f]:
                out[t].pairs[f] = out[t - 1].pairs[f]
    return out


def sequential_refine(chain, Q, maps, mesh, cfg=None, jobs=1):
    """Refine every frame independently; frames without contacts pass through unchanged."""
    cfg = cfg or RefineConfig()
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if len(maps) != len(Q):
        raise ValueError(f"contact timeline has {len(maps)} frames, sequence has {len(Q)}")
    if cfg.anchor_mode == "onset":
        maps = hold_contact_maps(maps)
    work = [(chain, Q[t], maps[t], mesh, cfg) for t in range(len(Q))]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            frames = list(ex.map(_refine_one, work))
    else:
        frames = []
        for t, w in enumerate(work):
            try:
                frames.append(_refine_one(w))
            except Exception as exc:
                raise RuntimeError(f"refinement failed at frame {t}: {exc}") from exc
    return RefineResult(np.array([f.q for f in frames]), frames)
