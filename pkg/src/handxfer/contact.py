"""Stage 2: fingertip contact detection and temporal imputation.

Raw states come from a per-fingertip hysteresis automaton on the distance to
the object surface. Single-frame glitches are then repaired by an
interpolation rule on the neighbouring states, but only where a local cubic
fit of the fingertip trajectory says the motion is plausible for contact
(likelihood gate on relative acceleration, speed below ``v_max``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import query_points
from .hand_model import FINGERS, fingertip_positions, surface_points


@dataclass
class ContactConfig:
    dis_min: float = 0.002
    dis_max: float = 0.005
    alpha_v: float = 0.6
    tau_c: float = 0.7
    v_f: float = 0.8
    f_c: float = 30.0
    beta1: float = 5.0
    v_max: float = 1.5
    delta_contact_map: float | None = None  # defaults to dis_max
    strict_literal: bool = False
    passes: int = 1
    measured_velocity: bool = False
    impute_scope: str = "isolated"  # or "all"

    def __post_init__(self):
        if not 0 < self.dis_min < self.dis_max:
            raise ValueError("need 0 < dis_min < dis_max")
        if not 0 < self.tau_c < 1:
            raise ValueError("tau_c must lie in (0, 1)")
        if self.passes < 1:
            raise ValueError("passes must be >= 1")
        if self.impute_scope not in ("isolated", "all"):
            raise ValueError("impute_scope must be 'isolated' or 'all'")

    @property
    def delta(self):
        return self.dis_max if self.delta_contact_map is None else self.delta_contact_map


@dataclass
class FingertipTrace:
    timestamps: np.ndarray   # (T,)
    positions: np.ndarray    # (T, 5, 3); NaN for fingers without a marker
    distances: np.ndarray    # (T, 5); inf for fingers without a marker

    def __len__(self):
        return len(self.timestamps)


def fingertip_trace(chain, Q, mesh, timestamps):
    """Fingertip positions and their distance to the surface (0 when inside)."""
    Q = np.atleast_2d(Q)
    pos = fingertip_positions(chain, Q)
    dist = np.full(pos.shape[:2], np.inf)
    have = ~np.isnan(pos[0, :, 0])
    if np.any(have):
        pts = pos[:, have].reshape(-1, 3)
        sd = query_points(mesh, pts).signed_distance.reshape(len(Q), -1)
        dist[:, have] = np.maximum(sd, 0.0)
    return FingertipTrace(np.asarray(timestamps, dtype=float), pos, dist)


def dual_threshold(trace, cfg):
    """Hysteresis contact states ``(T, 5)``: on below ``dis_min``, off above ``dis_max``."""
    d = trace.distances if isinstance(trace, FingertipTrace) else np.asarray(trace, dtype=float)
    if d.ndim == 1:
        d = d[:, None]
    if len(d) == 0:
        raise ValueError("empty trace")
    out = np.zeros(d.shape, dtype=bool)
    prev = np.zeros(d.shape[1], dtype=bool)
    for t in range(len(d)):
        cur = np.where(d[t] < cfg.dis_min, True, np.where(d[t] > cfg.dis_max, False, prev))
        out[t] = cur
        prev = cur
    return out


def velocity_displacement(v_prev, v_next, dt):
    """Trapezoidal displacement estimate between neighbouring frames."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return 0.5 * (v_prev + v_next) * dt


def interpolate_contact(c_prev, c_next, cfg, displacement=None):
    """Interpolated state from the two neighbours plus a velocity allowance."""
    if displacement is None:
        displacement = cfg.v_f / cfg.f_c
    score = abs(int(c_prev) + int(c_next)) / 2.0 + cfg.alpha_v * displacement
    return bool(score > cfg.tau_c)


@dataclass
class CubicFit:
    """Least-squares cubic in ``u - u0`` for each coordinate."""

    u0: float
    coeffs: np.ndarray  # (4, dim), ascending powers
    residual: float

    def __call__(self, u, order=0):
        x = np.asarray(u, dtype=float) - self.u0
        c = self.coeffs
        if order == 0:
            return c[0] + x * (c[1] + x * (c[2] + x * c[3]))
        if order == 1:
            return c[1] + x * (2 * c[2] + x * 3 * c[3])
        if order == 2:
            return 2 * c[2] + 6 * c[3] * x
        if order == 3:
            return 6 * c[3] + 0 * x
        return 0 * c[0]


def fit_spline(positions, timestamps):
    positions = np.asarray(positions, dtype=float)
    if positions.ndim == 1:
        positions = positions[:, None]
    u = np.asarray(timestamps, dtype=float)
    if len(np.unique(u)) != len(u):
        raise ValueError("duplicate timestamps in spline window")
    deg = min(3, len(u) - 1)
    x = u - u[0]
    V = np.vander(x, deg + 1, increasing=True)
    coef, *_ = np.linalg.lstsq(V, positions, rcond=None)
    full = np.zeros((4, positions.shape[1]))
    full[:deg + 1] = coef
    res = float(np.sum((V @ coef - positions) ** 2))
    return CubicFit(float(u[0]), full, res)


def _sigmoid(x):
    return float(0.5 * (1.0 + np.tanh(0.5 * x)))


def contact_probability(hand_acc, obj_acc, beta1, strict_literal=False):
    diff = np.asarray(hand_acc, dtype=float) - np.asarray(obj_acc, dtype=float)
    if strict_literal:
        return _sigmoid(beta1 * float(np.sum(diff)))
    return _sigmoid(-beta1 * float(np.linalg.norm(diff)))


@dataclass
class Imputation:
    raw: np.ndarray          # (T, 5)
    states: np.ndarray       # final (T, 5)
    probability: np.ndarray  # (T, 5); NaN where not evaluated
    speed: np.ndarray        # (T, 5)
    gate: np.ndarray         # (T, 5) bool

    @property
    def changed(self):
        return self.raw != self.states


def _window(t, T):
    n = min(5, T)
    start = min(max(t - 2, 0), T - n)
    return np.arange(start, start + n)


def motion_features(trace, obj_positions, cfg):
    """Per-frame/finger contact likelihood and fingertip speed from local cubic fits."""
    T = len(trace)
    ts = trace.timestamps
    prob = np.full((T, len(FINGERS)), np.nan)
    speed = np.full((T, len(FINGERS)), np.nan)
    obj_acc = np.zeros((T, 3))
    if obj_positions is not None:
        obj_positions = np.asarray(obj_positions, dtype=float)
        for t in range(1, T - 1):
            w = _window(t, T)
            obj_acc[t] = fit_spline(obj_positions[w], ts[w])(ts[t], 2)
    for f in range(len(FINGERS)):
        if np.isnan(trace.positions[0, f, 0]):
            continue
        for t in range(1, T - 1):
            w = _window(t, T)
            fit = fit_spline(trace.positions[w, f], ts[w])
            prob[t, f] = contact_probability(fit(ts[t], 2), obj_acc[t], cfg.beta1, cfg.strict_literal)
            speed[t, f] = float(np.linalg.norm(fit(ts[t], 1)))
    return prob, speed


def impute_states(raw, trace, obj_positions=None, cfg=None, detailed=False):
    """Replace states by their interpolated value where the motion gate is open.

    Boundary frames keep their raw state. Each pass interpolates from the
    previous pass's states. With ``impute_scope="isolated"`` only frames that
    disagree with both neighbours are candidates; ``"all"`` re-evaluates every
    gated frame, which also erodes the first and last frame of every run.
    """
    cfg = cfg or ContactConfig()
    raw = np.asarray(raw, dtype=bool)
    T = len(raw)
    prob, speed = motion_features(trace, obj_positions, cfg)
    with np.errstate(invalid="ignore"):
        gate = (prob > 0.5) & (speed < cfg.v_max)
    cur = raw.copy()
    dt = 1.0 / cfg.f_c
    for _ in range(cfg.passes):
        nxt = cur.copy()
        for t in range(1, T - 1):
            cand = gate[t]
            if cfg.impute_scope == "isolated":
                cand = cand & (cur[t - 1] == cur[t + 1]) & (cur[t] != cur[t - 1])
            for f in np.flatnonzero(cand):
                disp = None
                if cfg.measured_velocity:
                    disp = velocity_displacement(speed[t - 1, f] if t > 1 else speed[t, f],
                                                 speed[t + 1, f] if t < T - 2 else speed[t, f], dt)
                nxt[t, f] = interpolate_contact(cur[t - 1, f], cur[t + 1, f], cfg, disp)
        if np.array_equal(nxt, cur):
            break
        cur = nxt
    if not detailed:
        return cur
    return Imputation(raw, cur, prob, speed, gate)


def single_frame_flips(states):
    """Count isolated one-frame state changes ``s[t-1] == s[t+1] != s[t]``."""
    s = np.asarray(states, dtype=bool)
    if len(s) < 3:
        return 0
    return int(np.count_nonzero((s[:-2] == s[2:]) & (s[1:-1] != s[:-2])))


# --------------------------------------------------------------------------- contact maps

@dataclass
class ContactMap:
    """Per-finger ``(hand_point_index, object_vertex_index, distance)`` triples."""

    pairs: dict = field(default_factory=lambda: {f: [] for f in FINGERS})

    def __getitem__(self, finger):
        return self.pairs[finger]

    def is_empty(self):
        return all(len(v) == 0 for v in self.pairs.values())

    def to_json(self):
        return {f: [[int(h), int(v), float(d)] for h, v, d in self.pairs[f]] for f in FINGERS}

    @classmethod
    def from_json(cls, obj):
        return cls({f: [(int(h), int(v), float(d)) for h, v, d in obj.get(f, [])] for f in FINGERS})


def build_contact_map(chain, q, mesh, state, cfg):
    """Pair each in-contact finger's surface samples near the object with their nearest vertex."""
    cmap = ContactMap()
    state = np.asarray(state, dtype=bool)
    if not np.any(state):
        return cmap
    sp = surface_points(chain, q)
    res = query_points(mesh, sp.points)
    for i, f in enumerate(FINGERS):
        if not state[i]:
            continue
        sel = np.flatnonzero((sp.fingers == f) & (res.signed_distance <= cfg.delta))
        cmap.pairs[f] = [(int(sp.indices[k]), int(res.vertex_index[k]),
                          float(max(res.signed_distance[k], 0.0))) for k in sel]
    return cmap


@dataclass
class ContactTimeline:
    raw: np.ndarray        # (T, 5) bool
    states: np.ndarray     # (T, 5) bool, after imputation
    maps: list             # ContactMap per frame
    trace: FingertipTrace

    def __len__(self):
        return len(self.states)


def extract_contacts(chain, Q, mesh, timestamps, cfg=None, obj_positions=None):
    cfg = cfg or ContactConfig()
    trace = fingertip_trace(chain, Q, mesh, timestamps)
    raw = dual_threshold(trace, cfg)
    final = impute_states(raw, trace, obj_positions, cfg)
    maps = [build_contact_map(chain, q, mesh, s, cfg) for q, s in zip(Q, final)]
    return ContactTimeline(raw, final, maps, trace)
