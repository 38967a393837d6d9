"""Robot-hand kinematic chain: loading, forward kinematics, keypoints, surface samples.

A chain is a tree of single-DoF joints. The first six joints are the
unactuated "dummy" root DoF (x/y/z translation followed by x/y/z rotation,
so the palm pose is ``Trans(t) @ Rx @ Ry @ Rz``); the rest are the
articulated finger joints.

Chain files are JSON::

    {
      "name": "synth3",
      "pad_to": 28,                       # optional: append inert joints
      "joints": [{"name", "parent", "axis", "kind", "limits", "rest"}],
      "links":  [{"name", "parent_joint", "translation", "quat_wxyz",
                  "finger", "fingertip", "samples"}],
      "keypoints": [{"name", "link", "offset"}]
    }

``samples`` rows are ``[x, y, z, nx, ny, nz]`` in the link frame.
Unknown keys are rejected.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

log = logging.getLogger(__name__)

FINGERS = ("thumb", "index", "middle", "ring", "pinky")
LABELS = FINGERS + ("palm",)
N_DUMMY = 6
DEFAULT_DOF = 28
DEFAULT_KEYPOINTS = 13

_JOINT_KEYS = {"name", "parent", "axis", "kind", "limits", "rest"}
_LINK_KEYS = {"name", "parent_joint", "translation", "quat_wxyz", "finger", "fingertip", "samples"}
_KEYPOINT_KEYS = {"name", "link", "offset"}
_TOP_KEYS = {"name", "pad_to", "joints", "links", "keypoints"}


class ChainError(ValueError):
    """Raised for malformed or inconsistent chain descriptions."""


@dataclass(frozen=True)
class JointSpec:
    name: str
    parent_link: str
    axis: tuple[float, float, float]
    kind: str  # "revolute" | "prismatic"
    limits: tuple[float, float]
    rest_value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("revolute", "prismatic"):
            raise ChainError(f"joint {self.name!r}: unknown kind {self.kind!r}")
        if abs(np.linalg.norm(self.axis) - 1.0) > 1e-9:
            raise ChainError(f"joint {self.name!r}: axis is not unit norm")
        lo, hi = self.limits
        if not lo <= self.rest_value <= hi:
            raise ChainError(f"joint {self.name!r}: rest value outside limits")


@dataclass(frozen=True, eq=False)
class LinkFrame:
    name: str
    parent_joint: str | None
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    finger: str | None = None
    fingertip: np.ndarray | None = None
    sample_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    sample_normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))


@dataclass(frozen=True)
class KeypointDef:
    name: str
    link: str
    offset: tuple[float, float, float]


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


class KinematicChain:
    """Immutable kinematic tree with precomputed index arrays for fast FK."""

    def __init__(self, name, joints, links, keypoint_defs):
        self.name = name
        self.joints = tuple(joints)
        self.links = tuple(links)
        self.keypoint_defs = tuple(keypoint_defs)
        self._build()

    def _build(self):
        link_index = {}
        for i, link in enumerate(self.links):
            if link.name in link_index:
                raise ChainError(f"duplicate link {link.name!r}")
            link_index[link.name] = i
        joint_index = {}
        for i, j in enumerate(self.joints):
            if j.name in joint_index:
                raise ChainError(f"duplicate joint {j.name!r}")
            joint_index[j.name] = i
        self.link_index = link_index
        self.joint_index = joint_index

        roots = [l for l in self.links if l.parent_joint is None]
        if len(roots) != 1:
            raise ChainError(f"expected exactly one root link, found {len(roots)}")
        self.root_link = roots[0].name

        child_of = {}
        for link in self.links:
            if link.parent_joint is None:
                continue
            if link.parent_joint not in joint_index:
                raise ChainError(f"link {link.name!r}: unknown parent joint {link.parent_joint!r}")
            if link.parent_joint in child_of:
                raise ChainError(f"joint {link.parent_joint!r} drives more than one link")
            child_of[link.parent_joint] = link.name
        for j in self.joints:
            if j.name not in child_of:
                raise ChainError(f"joint {j.name!r} has no child link")
            if j.parent_link not in link_index:
                raise ChainError(f"joint {j.name!r}: unknown parent link {j.parent_link!r}")

        # topological order; anything unreachable from the root is part of a cycle
        order = []
        depth = {self.root_link: 0}
        frontier = [self.root_link]
        while frontier:
            nxt = []
            for ln in frontier:
                for j in self.joints:
                    if j.parent_link == ln:
                        c = child_of[j.name]
                        if c in depth:
                            raise ChainError("cycle detected")
                        depth[c] = depth[ln] + 1
                        order.append(joint_index[j.name])
                        nxt.append(c)
            frontier = nxt
        if len(order) != len(self.joints):
            raise ChainError("cycle detected")

        n = len(self.joints)
        self.n_dof = n
        self.lower = _readonly([j.limits[0] for j in self.joints])
        self.upper = _readonly([j.limits[1] for j in self.joints])
        self.rest = _readonly([j.rest_value for j in self.joints])
        self._order = np.array(order)
        self._parent = np.array([link_index[j.parent_link] for j in self.joints])
        self._child = np.array([link_index[child_of[j.name]] for j in self.joints])
        self._axis = np.array([j.axis for j in self.joints], dtype=float)
        self._revolute = np.array([j.kind == "revolute" for j in self.joints])
        self._local_R = np.array([self.links[c].rotation for c in self._child])
        self._local_p = np.array([self.links[c].translation for c in self._child])
        self._root = link_index[self.root_link]

        # moves[l, d]: joint d is an ancestor of link l
        L = len(self.links)
        moves = np.zeros((L, n), dtype=bool)
        for d in order:
            c, p = self._child[d], self._parent[d]
            moves[c] = moves[p]
            moves[c, d] = True
        moves.setflags(write=False)
        self.moves = moves

        # joint finger membership comes from the driven link
        self.joint_finger = tuple(self.links[c].finger for c in self._child)
        self.articulated = np.arange(N_DUMMY, n)
        for d in self.articulated:
            if self.joint_finger[d] not in LABELS:
                raise ChainError(
                    f"articulated joint {self.joints[d].name!r} has no finger/palm label")
        self.finger_dofs = {
            f: np.array([d for d in self.articulated if self.joint_finger[d] == f], dtype=int)
            for f in LABELS
        }

        pts, nrm, plink, pfinger = [], [], [], []
        for i, link in enumerate(self.links):
            k = len(link.sample_points)
            if k == 0:
                continue
            pts.append(link.sample_points)
            nrm.append(link.sample_normals)
            plink.extend([i] * k)
            pfinger.extend([link.finger or "palm"] * k)
        self.sample_local = _readonly(np.concatenate(pts) if pts else np.zeros((0, 3)))
        self.normal_local = _readonly(np.concatenate(nrm) if nrm else np.zeros((0, 3)))
        self.sample_link = np.array(plink, dtype=int)
        self.sample_finger = np.array(pfinger, dtype=object)

        for kd in self.keypoint_defs:
            if kd.link not in link_index:
                raise ChainError(f"keypoint {kd.name!r}: unknown link {kd.link!r}")
        self.keypoint_link = np.array([link_index[k.link] for k in self.keypoint_defs], dtype=int)
        self.keypoint_offset = _readonly([k.offset for k in self.keypoint_defs])

        tips = {}
        for f in FINGERS:
            owners = [i for i, l in enumerate(self.links) if l.finger == f and l.fingertip is not None]
            if len(owners) > 1:
                raise ChainError(f"finger {f!r} has more than one fingertip marker")
            if owners:
                tips[f] = (owners[0], np.asarray(self.links[owners[0]].fingertip, dtype=float))
        self.fingertips = tips

    @property
    def n_keypoints(self):
        return len(self.keypoint_defs)

    def sample_indices(self, finger=None):
        if finger is None:
            return np.arange(len(self.sample_local))
        return np.flatnonzero(self.sample_finger == finger)

    def clamp(self, q):
        """Clamp to joint limits; returns ``(q_clamped, was_clamped)``."""
        q = np.asarray(q, dtype=float)
        qc = np.clip(q, self.lower, self.upper)
        return qc, bool(np.any(qc != q))

    def fk_batch(self, Q, clamp=True):
        """World rotations ``(B, L, 3, 3)`` and origins ``(B, L, 3)`` for a batch of configurations."""
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        if Q.shape[1] != self.n_dof:
            raise ValueError(f"expected {self.n_dof} joint values, got {Q.shape[1]}")
        if clamp:
            Q = np.clip(Q, self.lower, self.upper)
        B, L = Q.shape[0], len(self.links)
        R = np.empty((B, L, 3, 3))
        p = np.empty((B, L, 3))
        R[:, self._root] = np.eye(3)
        p[:, self._root] = 0.0
        for d in self._order:
            par, ch = self._parent[d], self._child[d]
            Rl, pl, a = self._local_R[d], self._local_p[d], self._axis[d]
            Rp, pp = R[:, par], p[:, par]
            if self._revolute[d]:
                th = Q[:, d]
                K = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
                Rm = (np.eye(3)[None] + np.sin(th)[:, None, None] * K
                      + (1.0 - np.cos(th))[:, None, None] * (K @ K))
                R[:, ch] = Rp @ Rl @ Rm
                p[:, ch] = pp + Rp @ pl
            else:
                R[:, ch] = Rp @ Rl
                offs = pl[None] + (Rl @ a)[None] * Q[:, d, None]
                p[:, ch] = pp + np.einsum("bij,bj->bi", Rp, offs)
        return R, p

    def keypoints_batch(self, Q, clamp=True):
        R, p = self.fk_batch(Q, clamp=clamp)
        k = self.keypoint_link
        return np.einsum("bkij,kj->bki", R[:, k], self.keypoint_offset) + p[:, k]


@dataclass
class Pose:
    """Result of :func:`forward_kinematics`: link name -> 4x4 world transform."""

    transforms: dict
    clamped: bool
    q: np.ndarray

    def __getitem__(self, link):
        return self.transforms[link]


def forward_kinematics(chain, q, clamp=True):
    q = np.asarray(q, dtype=float)
    if not np.all(np.isfinite(q)):
        raise ValueError("joint vector must be finite")
    qc, clamped = chain.clamp(q)
    R, p = chain.fk_batch(qc if clamp else q, clamp=False)
    out = {}
    for i, link in enumerate(chain.links):
        T = np.eye(4)
        T[:3, :3] = R[0, i]
        T[:3, 3] = p[0, i]
        out[link.name] = T
    if clamped and clamp:
        log.debug("joint values clamped to limits")
    return Pose(out, clamped and clamp, qc if clamp else q)


def keypoints(chain, q):
    """World positions ``(N, 3)`` of the chain's keypoints."""
    return chain.keypoints_batch(np.asarray(q, dtype=float)[None])[0]


@dataclass
class SurfacePoints:
    points: np.ndarray
    normals: np.ndarray
    fingers: np.ndarray
    indices: np.ndarray

    def __len__(self):
        return len(self.points)


def surface_points(chain, q, finger=None):
    """World-frame surface samples with outward unit normals, optionally filtered by finger."""
    idx = chain.sample_indices(finger)
    R, p = chain.fk_batch(np.asarray(q, dtype=float)[None])
    R, p = R[0], p[0]
    links = chain.sample_link[idx]
    pts = np.einsum("kij,kj->ki", R[links], chain.sample_local[idx]) + p[links]
    nrm = np.einsum("kij,kj->ki", R[links], chain.normal_local[idx])
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return SurfacePoints(pts, nrm, chain.sample_finger[idx], idx)


def fingertip_positions(chain, Q):
    """Fingertip marker positions ``(B, 5, 3)``; NaN rows for fingers without a marker."""
    Q = np.atleast_2d(Q)
    R, p = chain.fk_batch(Q)
    out = np.full((Q.shape[0], len(FINGERS), 3), np.nan)
    for i, f in enumerate(FINGERS):
        if f in chain.fingertips:
            link, off = chain.fingertips[f]
            out[:, i] = R[:, link] @ off + p[:, link]
    return out


def joint_frames(chain, R, p):
    """World axes and origins ``(D, 3)`` of every joint for a single FK result."""
    ch = chain._child
    axes = np.einsum("dij,dj->di", R[ch], chain._axis)
    return axes, p[ch], chain._revolute


def point_jacobian(chain, R, p, links, points, dofs):
    """d(point)/d(q[dofs]) as ``(P, 3, len(dofs))`` for points rigidly attached to ``links``."""
    axes, origins, revolute = joint_frames(chain, R, p)
    dofs = np.asarray(dofs, dtype=int)
    a = axes[dofs]
    J = np.where(revolute[dofs][None, :, None],
                 np.cross(a[None], points[:, None, :] - origins[dofs][None]),
                 a[None])
    J = J * chain.moves[links][:, dofs][:, :, None]
    return np.transpose(J, (0, 2, 1))


def normal_jacobian(chain, R, p, links, normals, dofs):
    """d(normal)/d(q[dofs]) as ``(P, 3, len(dofs))``; prismatic joints do not rotate normals."""
    axes, _, revolute = joint_frames(chain, R, p)
    dofs = np.asarray(dofs, dtype=int)
    J = np.cross(axes[dofs][None], normals[:, None, :])
    J = J * (chain.moves[links][:, dofs] & revolute[dofs][None])[:, :, None]
    return np.transpose(J, (0, 2, 1))


def root_pose(q):
    """4x4 transform encoded by the six dummy DoF."""
    T = np.eye(4)
    T[:3, :3] = Rotation.from_euler("XYZ", q[3:6]).as_matrix()
    T[:3, 3] = q[:3]
    return T


def root_from_transform(T):
    """Inverse of :func:`root_pose`."""
    q = np.zeros(6)
    q[:3] = T[:3, 3]
    q[3:] = Rotation.from_matrix(T[:3, :3]).as_euler("XYZ")
    return q


# --------------------------------------------------------------------------- loading

def _check_keys(kind, obj, allowed, required):
    if not isinstance(obj, dict):
        raise ChainError(f"{kind} entry must be an object")
    unknown = set(obj) - allowed
    if unknown:
        raise ChainError(f"{kind} {obj.get('name', '?')!r}: unknown fields {sorted(unknown)}")
    missing = set(required) - set(obj)
    if missing:
        raise ChainError(f"{kind} {obj.get('name', '?')!r}: missing fields {sorted(missing)}")


def _validate_dummy(joints, links_by_joint, root):
    if len(joints) < N_DUMMY:
        raise ChainError("chain needs six dummy root joints")
    kinds = ["prismatic"] * 3 + ["revolute"] * 3
    parent = root
    for i, j in enumerate(joints[:N_DUMMY]):
        if j.kind != kinds[i] or not np.allclose(j.axis, np.eye(3)[i % 3]):
            raise ChainError(f"dummy joint {i} ({j.name!r}) must be a {kinds[i]} joint on axis {'xyz'[i % 3]}")
        if j.parent_link != parent:
            raise ChainError("dummy joints must form a serial chain from the root link")
        child = links_by_joint[j.name]
        if not (np.allclose(child.translation, 0) and np.allclose(child.rotation, np.eye(3))):
            raise ChainError("dummy joint links must have identity local transforms")
        parent = child.name


def chain_from_dict(data, *, expected_dof=DEFAULT_DOF, n_keypoints=DEFAULT_KEYPOINTS,
                    allow_dof_mismatch=False):
    _check_keys("chain", data, _TOP_KEYS, {"joints", "links", "keypoints"})
    joints = []
    seen = set()
    for jd in data["joints"]:
        _check_keys("joint", jd, _JOINT_KEYS, {"name", "parent", "axis", "kind", "limits"})
        if jd["name"] in seen:
            raise ChainError(f"duplicate joint {jd['name']!r}")
        seen.add(jd["name"])
        lo, hi = (float(v) for v in jd["limits"])
        if lo > hi:
            raise ChainError(f"joint {jd['name']!r}: lower limit above upper limit")
        joints.append(JointSpec(jd["name"], jd["parent"], tuple(float(v) for v in jd["axis"]),
                                jd["kind"], (lo, hi), float(jd.get("rest", 0.0))))
    links = []
    for ld in data["links"]:
        _check_keys("link", ld, _LINK_KEYS, {"name"})
        finger = ld.get("finger")
        if finger is not None and finger not in LABELS:
            raise ChainError(f"link {ld['name']!r}: unknown finger label {finger!r}")
        quat = ld.get("quat_wxyz", [1.0, 0.0, 0.0, 0.0])
        w, x, y, z = (float(v) for v in quat)
        rot = Rotation.from_quat([x, y, z, w]).as_matrix()
        samples = np.asarray(ld.get("samples", []), dtype=float).reshape(-1, 6)
        nrm = samples[:, 3:]
        if len(nrm) and not np.allclose(np.linalg.norm(nrm, axis=1), 1.0, atol=1e-6):
            raise ChainError(f"link {ld['name']!r}: sample normals must be unit length")
        tip = ld.get("fingertip")
        links.append(LinkFrame(
            ld["name"], ld.get("parent_joint"),
            _readonly(ld.get("translation", [0.0, 0.0, 0.0])), _readonly(rot), finger,
            None if tip is None else _readonly(tip),
            _readonly(samples[:, :3]), _readonly(nrm),
        ))
    kps = []
    for kd in data["keypoints"]:
        _check_keys("keypoint", kd, _KEYPOINT_KEYS, {"name", "link", "offset"})
        kps.append(KeypointDef(kd["name"], kd["link"], tuple(float(v) for v in kd["offset"])))

    pad_to = data.get("pad_to")
    if pad_to is not None and len(joints) < pad_to:
        palm = next((l.name for l in links if l.finger == "palm"), None)
        if palm is None:
            raise ChainError("padding requires a link labelled 'palm'")
        for k in range(pad_to - len(joints)):
            name = f"pad_{k:02d}"
            joints.append(JointSpec(name, palm, (0.0, 0.0, 1.0), "revolute", (0.0, 0.0), 0.0))
            links.append(LinkFrame(f"{name}_link", name, _readonly(np.zeros(3)),
                                   _readonly(np.eye(3)), "palm"))

    links_by_joint = {l.parent_joint: l for l in links if l.parent_joint is not None}
    roots = [l.name for l in links if l.parent_joint is None]
    chain = KinematicChain(data.get("name", "chain"), joints, links, kps)
    _validate_dummy(joints, links_by_joint, roots[0])

    if chain.n_dof != expected_dof:
        msg = f"chain has {chain.n_dof} DoF, expected {expected_dof}"
        if not allow_dof_mismatch:
            raise ChainError(msg)
        warnings.warn(msg)
    if chain.n_keypoints != n_keypoints:
        msg = f"chain has {chain.n_keypoints} keypoints, expected {n_keypoints}"
        if not allow_dof_mismatch:
            raise ChainError(msg)
        warnings.warn(msg)
    return chain


def load_chain(path, **kwargs):
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ChainError(f"{path}: cannot parse chain file: {exc}") from exc
    return chain_from_dict(data, **kwargs)
