"""Bound-constrained optimizers used by the retargeting and refinement stages.

* :func:`crs2` - controlled random search with local mutation (global).
* :func:`lm_polish` - damped Gauss-Newton on a residual vector with
  finite-difference Jacobians (local).
* :func:`projected_gradient_descent` - gradient projection onto a box with
  Armijo backtracking (local, monotone).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class BudgetError(ValueError):
    pass


@dataclass
class SearchResult:
    x: np.ndarray
    value: float
    evaluations: int
    population: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)


def _as_batched(objective, batched):
    if batched:
        return lambda X: np.asarray(objective(X), dtype=float).reshape(len(X))
    return lambda X: np.array([float(objective(x)) for x in X])


def crs2(objective, lower, upper, *, budget, population_size=None, seed=0,
         init_points=None, batched=False, batch_size=None):
    """Controlled random search (CRS2) with local mutation.

    Keeps a population of ``10 (n + 1)`` points. Each trial reflects a random
    simplex (the current best plus ``n`` random members) through the centroid
    of its first ``n`` vertices; infeasible or non-improving reflections fall
    back to a local mutation around the best point. A trial replaces the
    current worst member when it improves on it.

    Trials are generated ``batch_size`` at a time from the same population
    snapshot so the objective can be evaluated in one vectorised call;
    replacements are then applied in generation order, which keeps the result
    independent of how the batch is evaluated.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
        raise ValueError("bounds must be finite")
    if np.any(lower > upper):
        raise ValueError("lower bound above upper bound")
    n = len(lower)
    N = population_size or 10 * (n + 1)
    if budget < N:
        raise BudgetError(f"budget {budget} is smaller than the population size {N}")
    f = _as_batched(objective, batched)
    rng = np.random.default_rng(seed)
    batch_size = batch_size or max(1, n + 1)

    pop = lower + rng.random((N, n)) * (upper - lower)
    if init_points is not None:
        init = np.clip(np.atleast_2d(np.asarray(init_points, dtype=float)), lower, upper)[:N]
        pop[:len(init)] = init
    vals = f(pop)
    evals = N
    k_simplex = min(n + 1, N)

    while evals < budget:
        m = min(batch_size, budget - evals)
        best = int(np.argmin(vals))
        worst_val = vals.max()
        refl, anchors = [], []
        for _ in range(m):
            others = rng.choice(np.delete(np.arange(N), best), size=k_simplex - 1, replace=False)
            simplex = np.vstack([pop[best], pop[others]])
            centroid = simplex[:-1].mean(axis=0)
            refl.append(2.0 * centroid - simplex[-1])
            anchors.append(simplex[1])
        refl = np.array(refl)
        feasible = np.all((refl >= lower) & (refl <= upper), axis=1)
        cand, cand_vals = [], []
        if np.any(feasible):
            rv = f(refl[feasible])
            evals += int(feasible.sum())
            rvals = np.full(m, np.inf)
            rvals[feasible] = rv
        else:
            rvals = np.full(m, np.inf)
        need = rvals >= worst_val
        n_mut = min(int(need.sum()), budget - evals)
        mut_idx = np.flatnonzero(need)[:n_mut]
        mvals = {}
        if n_mut:
            w = rng.random((n_mut, n))
            mut = np.clip((1.0 + w) * pop[best] - w * np.array(anchors)[mut_idx], lower, upper)
            mv = f(mut)
            evals += n_mut
            for j, i in enumerate(mut_idx):
                mvals[i] = (mut[j], mv[j])
        for i in range(m):
            if not need[i]:
                cand.append(refl[i])
                cand_vals.append(rvals[i])
            elif i in mvals:
                cand.append(mvals[i][0])
                cand_vals.append(mvals[i][1])
        for x, v in zip(cand, cand_vals):
            worst = int(np.argmax(vals))
            if v < vals[worst]:
                pop[worst] = x
                vals[worst] = v

    best = int(np.argmin(vals))
    return SearchResult(pop[best].copy(), float(vals[best]), evals, pop, vals)


@dataclass
class PolishResult:
    x: np.ndarray
    value: float
    iterations: int
    evaluations: int


def lm_polish(residuals, x0, lower, upper, *, const=0.0, max_iter=100, rtol=1e-8, h=1e-5,
              free=None):
    """Bounded Levenberg-Marquardt on ``sum(residuals(x)**2) + const``.

    ``residuals`` maps a batch ``(B, n)`` to ``(B, m)``. The Jacobian uses
    central differences with step ``h``; steps are projected onto the box and
    only accepted when they lower the objective, so the result is never worse
    than ``x0``.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    if free is None:
        free = np.flatnonzero(upper > lower)
    free = np.asarray(free, dtype=int)
    r = residuals(x[None])[0]
    fx = float(r @ r) + const
    evals = 1
    mu = 1e-3
    it = 0
    k = len(free)
    if k == 0:
        return PolishResult(x, fx, 0, evals)
    E = np.zeros((k, len(x)))
    E[np.arange(k), free] = h
    for it in range(1, max_iter + 1):
        R = residuals(np.vstack([x + E, x - E]))
        evals += 2 * k
        J = (R[:k] - R[k:]).T / (2 * h)
        JTJ = J.T @ J
        g = J.T @ r
        improved = False
        for _ in range(12):
            A = JTJ + mu * (np.diag(np.diag(JTJ)) + 1e-12 * np.eye(k))
            try:
                step = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            xn = x.copy()
            xn[free] = np.clip(x[free] + step, lower[free], upper[free])
            rn = residuals(xn[None])[0]
            evals += 1
            fn = float(rn @ rn) + const
            if fn < fx:
                rel = (fx - fn) / max(abs(fx), 1e-300)
                x, r, fx = xn, rn, fn
                mu = max(mu / 3.0, 1e-12)
                improved = True
                break
            mu *= 4.0
        if not improved or rel < rtol:
            break
    return PolishResult(x, fx, it, evals)


@dataclass
class DescentResult:
    x: np.ndarray
    value: float
    iterations: int
    trace: list


def _metric_step(x, g, H, lower, upper, eps=1e-12):
    """Variable-metric direction on the free set; bound-pinned coordinates stay put."""
    pinned = ((x <= lower + eps) & (g > 0)) | ((x >= upper - eps) & (g < 0))
    free = np.flatnonzero(~pinned)
    d = np.zeros_like(x)
    if len(free) == 0:
        return d
    Hf = H[np.ix_(free, free)]
    Hf = Hf + (1e-10 * max(np.trace(Hf) / len(free), 1e-300)) * np.eye(len(free))
    try:
        d[free] = -np.linalg.solve(Hf, g[free])
    except np.linalg.LinAlgError:
        return np.zeros_like(x)
    return d


def projected_gradient_descent(fun_grad, x0, lower, upper, *, max_iter=100, step_tol=1e-9,
                               ftol=1e-12, c=1e-4, shrink=0.5, max_backtracks=40,
                               initial_step=0.05):
    """Minimise ``fun_grad(x) -> (f, g)`` over a box.

    Step lengths start from a Barzilai-Borwein estimate and are shrunk until
    the Armijo condition holds along the projection arc. ``trace`` lists the
    objective at every accepted iterate (starting with ``x0``) and is
    non-increasing by construction.

    If ``fun_grad`` returns a third value ``H`` (a positive semi-definite
    curvature estimate, e.g. Gauss-Newton), the unit step along ``-H^-1 g`` is
    tried first on the same projection arc; the gradient step is the fallback
    whenever it fails the Armijo test.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    fx, g, *H = fun_grad(x)
    if not np.isfinite(fx):
        raise FloatingPointError("objective is not finite at the starting point")
    trace = [fx]
    gmax = np.max(np.abs(g)) if len(g) else 0.0
    alpha = initial_step / gmax if gmax > 0 else 1.0
    it = 0

    def search(direction, t):
        for _ in range(max_backtracks):
            xn = np.clip(x + t * direction, lower, upper)
            d = xn - x
            if np.max(np.abs(d)) < step_tol:
                return None
            slope = g @ d
            if slope < 0:
                fn, gn, *Hn = fun_grad(xn)
                if np.isfinite(fn) and fn <= fx + c * slope:
                    return xn, fn, gn, Hn, t
            t *= shrink
        return None

    for it in range(1, max_iter + 1):
        if not np.any(np.abs(np.clip(x - g, lower, upper) - x) > 0):
            break
        step = None
        if H:
            d = _metric_step(x, g, H[0], lower, upper)
            if np.any(d):
                step = search(d, 1.0)
        if step is None:
            step = search(-g, alpha)
        if step is None:
            break
        xn, fn, gn, Hn, t = step
        s, y = xn - x, gn - g
        sy = s @ y
        gs = np.linalg.norm(s) / max(np.linalg.norm(g), 1e-300)
        alpha = (s @ s) / sy if sy > 1e-300 else 2.0 * gs
        alpha = min(alpha, 1e6 * max(gs, 1e-12))
        drop = fx - fn
        x, fx, g, H = xn, fn, gn, Hn
        trace.append(fx)
        if drop <= ftol * max(abs(fx), 1e-300) or np.max(np.abs(s)) < step_tol:
            break
    return DescentResult(x, fx, it, trace)
