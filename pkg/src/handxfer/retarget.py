"""Stage 1: keypoint retargeting with temporal regularisation.

Each frame minimises

    sum_i |v_H^i - v_R^i(q)|^2 + alpha |q - q_prev|^2          (alignment)
  + lam * sum_window |q_t - 2 q_{t-1} + q_{t-2}|^2_{Sigma^-1}  (second difference)
  + gamma |q - q_pred|^2                                        (constant-velocity prior)

with a CRS2 global search followed by a Levenberg-Marquardt polish. Every
term is a sum of squares, so the polish works on the stacked residual vector.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .hand_model import N_DUMMY, keypoints, root_from_transform
from .optim import crs2, lm_polish

log = logging.getLogger(__name__)


@dataclass
class RetargetConfig:
    alpha: float = 1e-3
    lam: float = 0.1
    gamma: float = 0.5
    sigma_inv: np.ndarray | None = None  # defaults to identity
    window_k: int = 4
    dt: float = 1 / 30
    search_budget: int = 1000
    population_size: int | None = None
    seed: int = 0
    polish_iters: int = 100
    polish_rtol: float = 1e-8
    fd_step: float = 1e-5
    warm_jitter: float = 0.05
    n_jitter: int = 8
    root_margin: float = 0.25
    position_scale: float = 1.0  # keypoint residuals are multiplied by this (1 = meters)

    def __post_init__(self):
        for name in ("alpha", "lam", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.position_scale > 0:
            raise ValueError("position_scale must be positive")
        if self.window_k < 2:
            raise ValueError("window_k must be at least 2")
        if self.sigma_inv is not None:
            S = np.asarray(self.sigma_inv, dtype=float)
            if S.shape[0] != S.shape[1] or not np.allclose(S, S.T):
                raise ValueError("sigma_inv must be a symmetric square matrix")
            if np.linalg.eigvalsh(S).min() < -1e-10:
                raise ValueError("sigma_inv must be positive semi-definite")
            self.sigma_inv = S

    def weight_matrix(self, n):
        return np.eye(n) if self.sigma_inv is None else self.sigma_inv


@dataclass
class HumanFrame:
    timestamp: float
    keypoints: np.ndarray

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=float)
        if not np.all(np.isfinite(self.keypoints)):
            raise ValueError("human keypoints must be finite")


@dataclass
class SlidingWindow:
    """The last ``k`` solved poses (oldest first)."""

    k: int = 4
    dt: float = 1 / 30
    history: deque = field(default_factory=deque)
    times: deque = field(default_factory=deque)

    def push(self, t, q):
        self.history.append(np.asarray(q, dtype=float).copy())
        self.times.append(float(t))
        while len(self.history) > self.k:
            self.history.popleft()
            self.times.popleft()

    def __len__(self):
        return len(self.history)

    @property
    def last_velocity(self):
        if len(self.history) < 2:
            return None
        return (self.history[-1] - self.history[-2]) / self.dt


def alignment_loss(chain, q, frame, q_prev=None, alpha=0.0, position_scale=1.0):
    target = frame.keypoints if isinstance(frame, HumanFrame) else np.asarray(frame)
    if len(target) != chain.n_keypoints:
        raise ValueError(f"frame has {len(target)} keypoints, chain has {chain.n_keypoints}")
    diff = position_scale * (target - keypoints(chain, q))
    loss = float(np.sum(diff * diff))
    if q_prev is not None:
        dq = np.asarray(q) - q_prev
        loss += alpha * float(dq @ dq)
    return loss


def temporal_loss(window, q, sigma_inv, lam):
    """Weighted sum of squared second differences over ``window.history + [q]``."""
    seq = list(window.history) + [np.asarray(q, dtype=float)]
    if len(seq) < 3 or lam == 0:
        return 0.0
    W = np.eye(len(q)) if sigma_inv is None else np.asarray(sigma_inv)
    total = 0.0
    for a, b, c in zip(seq, seq[1:], seq[2:]):
        d2 = c - 2 * b + a
        total += float(d2 @ W @ d2)
    return lam * total


def predicted_pose(window, dt=None):
    """Constant-velocity extrapolation from the two most recent poses."""
    if len(window) == 0:
        raise ValueError("empty window")
    q1 = window.history[-1]
    if len(window) < 2:
        return q1.copy()
    dt = window.dt if dt is None else dt
    vel = (q1 - window.history[-2]) / window.dt
    return q1 + dt * vel


def total_objective(chain, q, frame, window, cfg):
    q = np.asarray(q, dtype=float)
    q_prev = window.history[-1] if len(window) else None
    val = alignment_loss(chain, q, frame, q_prev, cfg.alpha, cfg.position_scale)
    val += temporal_loss(window, q, cfg.weight_matrix(len(q)), cfg.lam)
    if len(window):
        dp = q - predicted_pose(window, cfg.dt)
        val += cfg.gamma * float(dp @ dp)
    return val


def _sqrt_weight(W):
    w, V = np.linalg.eigh(W)
    return (V * np.sqrt(np.clip(w, 0.0, None))).T


class FrameProblem:
    """Stacked residuals for one frame: ``objective(q) = |r(q)|^2 + const``."""

    def __init__(self, chain, frame, window, cfg):
        self.chain = chain
        self.target = frame.keypoints.reshape(-1)
        self.u = cfg.position_scale
        n = chain.n_dof
        self.parts = []
        self.const = 0.0
        hist = list(window.history)
        if hist:
            self.q_prev = hist[-1]
            self.q_pred = predicted_pose(window, cfg.dt)
        else:
            self.q_prev = self.q_pred = None
        self.sa = np.sqrt(cfg.alpha)
        self.sg = np.sqrt(cfg.gamma)
        W = cfg.weight_matrix(n)
        self.S = np.sqrt(cfg.lam) * _sqrt_weight(W) if cfg.lam > 0 and len(hist) >= 2 else None
        if self.S is not None:
            self.base = -2 * hist[-1] + hist[-2]
            for a, b, c in zip(hist, hist[1:], hist[2:]):
                d2 = c - 2 * b + a
                self.const += cfg.lam * float(d2 @ W @ d2)

    def residuals(self, Q):
        Q = np.atleast_2d(Q)
        K = self.chain.keypoints_batch(Q, clamp=False).reshape(len(Q), -1)
        parts = [self.u * (self.target[None] - K)]
        if self.q_prev is not None:
            parts.append(self.sa * (Q - self.q_prev))
            parts.append(self.sg * (Q - self.q_pred))
        if self.S is not None:
            parts.append((Q + self.base) @ self.S.T)
        return np.hstack(parts)

    def objective(self, Q):
        R = self.residuals(Q)
        return np.einsum("ij,ij->i", R, R) + self.const


def _kabsch_root(chain, target):
    """Root pose aligning the rest-pose keypoints to ``target`` (rigid, least squares)."""
    q = np.array(chain.rest, dtype=float)
    q[:N_DUMMY] = 0.0
    src = keypoints(chain, q)
    cs, ct = src.mean(axis=0), target.mean(axis=0)
    H = (src - cs).T @ (target - ct)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = ct - R @ cs
    q[:N_DUMMY] = root_from_transform(T)
    return np.clip(q, chain.lower, chain.upper)


def search_bounds(chain, frame, cfg):
    lo, hi = np.array(chain.lower), np.array(chain.upper)
    c = frame.keypoints.mean(axis=0)
    lo[:3] = np.maximum(lo[:3], c - cfg.root_margin)
    hi[:3] = np.minimum(hi[:3], c + cfg.root_margin)
    return lo, hi


def global_search(objective, bounds, cfg, init_points=None, batched=True, seed=None):
    """CRS2 over ``bounds``; returns ``(q_best, value, evaluations)``."""
    lo, hi = bounds
    res = crs2(objective, lo, hi, budget=cfg.search_budget, population_size=cfg.population_size,
               seed=cfg.seed if seed is None else seed, init_points=init_points, batched=batched)
    return res.x, res.value, res.evaluations


@dataclass
class RetargetResult:
    q: np.ndarray            # (T, n_dof)
    objective: np.ndarray    # final per-frame objective
    evaluations: np.ndarray
    timestamps: np.ndarray


def retarget_frame(chain, frame, window, cfg, index=0):
    problem = FrameProblem(chain, frame, window, cfg)
    lo, hi = search_bounds(chain, frame, cfg)
    rng = np.random.default_rng([cfg.seed, index])
    if len(window) == 0:
        seeds = [_kabsch_root(chain, frame.keypoints)]
    else:
        qp = np.clip(problem.q_pred, lo, hi)
        seeds = [np.clip(problem.q_prev, lo, hi), qp]
        scale = np.full(chain.n_dof, cfg.warm_jitter)
        scale[:3] *= 0.1
        for _ in range(cfg.n_jitter):
            seeds.append(np.clip(qp + rng.normal(0.0, 1.0, chain.n_dof) * scale, lo, hi))
    q0, v0, evals = global_search(problem.objective, (lo, hi), cfg, init_points=np.array(seeds),
                                  seed=int(rng.integers(2 ** 31)))
    pol = lm_polish(problem.residuals, q0, lo, hi, const=problem.const,
                    max_iter=cfg.polish_iters, rtol=cfg.polish_rtol, h=cfg.fd_step)
    q = pol.x if pol.value <= v0 else q0
    return q, min(pol.value, v0), evals + pol.evaluations


def retarget_sequence(chain, frames, cfg=None, on_frame=None):
    """Retarget every frame in order; frame ``t`` sees the solutions of earlier frames."""
    cfg = cfg or RetargetConfig()
    if not frames:
        raise ValueError("need at least one frame")
    window = SlidingWindow(cfg.window_k, cfg.dt)
    out, vals, evs = [], [], []
    for t, frame in enumerate(frames):
        try:
            q, v, e = retarget_frame(chain, frame, window, cfg, index=t)
        except Exception as exc:
            raise RuntimeError(f"retargeting failed at frame {t}: {exc}") from exc
        window.push(frame.timestamp, q)
        out.append(q)
        vals.append(v)
        evs.append(e)
        if on_frame is not None:
            on_frame(t, q, v)
    return RetargetResult(np.array(out), np.array(vals), np.array(evs),
                          np.array([f.timestamp for f in frames]))
