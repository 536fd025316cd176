"""Lower-level solvers for ``min_x 0.5||Ax - y||^2 + alpha * J(x)``.

Both solvers run on a batch of measurement vectors sharing one sensing
matrix; every sample keeps its own step sizes and stopping state, so a
sample's iterates do not depend on what else is in the batch.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import MeasurementSet, as_matrix
from .regularizers import GRADIENT_NORM_SQ, Regulariser, TotalVariation, image_gradient, image_gradient_adjoint

PDHG = "pdhg"
NMAPG = "nmapg"


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class ReconConfig:
    max_iters: int = 2000
    tol: float = 1e-7
    solver: str = NMAPG
    tau: float | None = None
    sigma: float | None = None
    sufficient_decrease: float = 1e-4
    eta: float = 0.8
    max_backtracks: int = 60
    bb_steps: bool = False
    record_history: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.solver not in (PDHG, NMAPG):
            raise ValueError(f"unknown solver {self.solver!r}")
        if not 0 <= self.eta < 1:
            raise ValueError("eta must lie in [0, 1)")

    @classmethod
    def training(cls, **kw) -> "ReconConfig":
        return cls(**{"max_iters": 500, "tol": 1e-5, **kw})

    @classmethod
    def evaluation(cls, **kw) -> "ReconConfig":
        return cls(**{"max_iters": 2000, "tol": 1e-7, **kw})


@dataclass
class ReconResult:
    x_hat: np.ndarray
    iterations: int
    final_residual: float
    converged: bool = True
    objective_history: list | None = None
    residual_history: list | None = field(default=None, repr=False)


def _shape_for(N, shape):
    if shape is None:
        side = math.isqrt(N)
        if side * side != N:
            raise ValueError(f"cannot infer a square image shape for N={N}; pass shape=")
        return side, side
    if shape[0] * shape[1] != N:
        raise ValueError(f"shape {shape} does not match N={N}")
    return tuple(shape)


def _measurements(y) -> np.ndarray:
    if isinstance(y, MeasurementSet):
        return y.y
    return np.asarray(y, dtype=np.float64)


def spectral_norm_sq(A) -> float:
    a = as_matrix(A)
    gram = a @ a.T if a.shape[0] <= a.shape[1] else a.T @ a
    return float(np.linalg.eigvalsh(gram)[-1])


def lipschitz_estimate(A, alpha: float, J: Regulariser | None) -> float:
    """Upper estimate of the gradient Lipschitz constant of the smooth energy."""
    L = spectral_norm_sq(A)
    if alpha > 0 and J is not None:
        L += alpha * J.lipschitz()
    return L


def initial_guess(A, Y) -> np.ndarray:
    a = as_matrix(A)
    return (Y @ a) / a.shape[1]


class _Energy:
    """Smooth energy ``0.5||Ax - y||^2 + alpha J(x)`` evaluated row-wise on a batch."""

    def __init__(self, A, Y, alpha, J, shape):
        self.A = A
        self.Y = Y
        self.alpha = alpha
        self.J = J if alpha > 0 else None
        self.shape = shape

    def _img(self, X):
        return X.reshape(X.shape[:-1] + self.shape)

    def value(self, X, rows=slice(None)):
        r = X @ self.A.T - self.Y[rows]
        e = 0.5 * np.sum(r * r, axis=-1)
        if self.J is not None:
            e = e + self.alpha * self.J.value(self._img(X))
        return e

    def value_grad(self, X, rows=slice(None)):
        r = X @ self.A.T - self.Y[rows]
        e = 0.5 * np.sum(r * r, axis=-1)
        g = r @ self.A
        if self.J is not None:
            jv, jg = self.J.value_grad(self._img(X))
            e = e + self.alpha * jv
            g = g + self.alpha * jg.reshape(g.shape)
        return e, g


def _norms(X):
    return np.sqrt(np.sum(X * X, axis=-1))


def _backtrack(energy, base, F_base, G_base, s, rows, max_bt):
    """Halve per-row steps until the descent-lemma test holds."""
    gg = np.sum(G_base * G_base, axis=-1)
    slack = 1e-13 * np.maximum(1.0, np.abs(F_base))
    cand = base - s[:, None] * G_base
    F = energy.value(cand, rows)
    bad = ~(F <= F_base - 0.5 * s * gg + slack)
    for _ in range(max_bt):
        if not bad.any():
            return cand, F, s
        s = np.where(bad, 0.5 * s, s)
        sub = np.flatnonzero(bad)
        cand[sub] = base[sub] - s[sub, None] * G_base[sub]
        F[sub] = energy.value(cand[sub], rows[sub])
        bad[sub] = ~(F[sub] <= F_base[sub] - 0.5 * s[sub] * gg[sub] + slack[sub])
    if bad.any():
        raise SolverError(f"backtracking exhausted {max_bt} halvings")
    return cand, F, s


def nmapg_batch(A, Y, alpha: float, J: Regulariser | None, cfg: ReconConfig, shape=None, X0=None):
    """Nonmonotone accelerated proximal gradient on a batch (no proximal term).

    Returns ``(X, iterations, residuals, converged, histories)`` with one row
    per measurement vector. Stops a row once
    ``||grad E(x)|| <= tol * max(1, ||grad E(x0)||)``.
    """
    a = as_matrix(A)
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    B, N = Y.shape[0], a.shape[1]
    if Y.shape[1] != a.shape[0]:
        raise ValueError(f"measurements have length {Y.shape[1]}, matrix has {a.shape[0]} rows")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if alpha > 0 and (J is None or not J.smooth):
        raise ValueError("nmAPG needs a smooth regulariser")
    shape = _shape_for(N, shape)
    energy = _Energy(a, Y, alpha, J, shape)
    s0 = 1.0 / lipschitz_estimate(a, alpha, J)
    delta, eta = cfg.sufficient_decrease, cfg.eta

    X = initial_guess(a, Y) if X0 is None else np.array(np.broadcast_to(X0, (B, N)), dtype=np.float64)
    X_prev = X.copy()
    Zc = X.copy()
    F_x, G_x = energy.value_grad(X)
    if not np.all(np.isfinite(F_x)):
        raise SolverError("non-finite objective at the initial point")
    thresh = cfg.tol * np.maximum(1.0, _norms(G_x))
    c = F_x.copy()
    q = np.ones(B)
    t, t_prev = 1.0, 0.0
    iters = np.zeros(B, dtype=int)
    residual = np.zeros(B)
    active = _norms(G_x) > thresh
    hist = [[float(f)] for f in F_x] if cfg.record_history else None
    rhist = [[] for _ in range(B)] if cfg.record_history else None

    y_last = np.zeros_like(X)
    g_last = np.zeros_like(X)
    s_try = np.full(B, s0)
    fresh = np.ones(B, dtype=bool)  # G_x holds the gradient at the current X

    def refresh(sub):
        sub = sub[~fresh[sub]]
        if sub.size:
            _, G_x[sub] = energy.value_grad(X[sub], sub)
            fresh[sub] = True

    for k in range(cfg.max_iters):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        x, xp, z = X[rows], X_prev[rows], Zc[rows]
        yk = x + (t_prev / t) * (z - x) + ((t_prev - 1.0) / t) * (x - xp)
        F_y, G_y = energy.value_grad(yk, rows)
        if cfg.bb_steps and k > 0:
            # Barzilai-Borwein trial step, never below 1/L
            dy = yk - y_last[rows]
            dg = G_y - g_last[rows]
            num = np.sum(dy * dy, axis=-1)
            den = np.abs(np.sum(dy * dg, axis=-1))
            bb = np.divide(num, den, out=np.full(rows.size, s0), where=den > 0)
            s_try[rows] = np.clip(bb, s0, 1e6 * s0)
        y_last[rows], g_last[rows] = yk, G_y
        z_new, F_z, _ = _backtrack(energy, yk, F_y, G_y, s_try[rows].copy(), rows, cfg.max_backtracks)
        dz = z_new - yk
        accept = F_z <= c[rows] - delta * np.sum(dz * dz, axis=-1)
        x_new = np.where(accept[:, None], z_new, x)
        F_new = np.where(accept, F_z, F_x[rows])
        rej = np.flatnonzero(~accept)
        if rej.size:
            # monotone fallback: a plain gradient step from x_k
            rr = rows[rej]
            refresh(rr)
            v, F_v, _ = _backtrack(energy, x[rej], F_x[rr], G_x[rr], s_try[rr].copy(), rr, cfg.max_backtracks)
            use_z = (F_z[rej] <= F_v) & (F_z[rej] <= c[rr])
            use_v = ~use_z & (F_v <= c[rr])
            x_new[rej] = np.where(use_z[:, None], z_new[rej], np.where(use_v[:, None], v, x[rej]))
            F_new[rej] = np.where(use_z, F_z[rej], np.where(use_v, F_v, F_x[rr]))
        if not np.all(np.isfinite(F_new)):
            raise SolverError("non-finite objective")

        step = x_new - x
        moved = np.any(step != 0, axis=-1)
        Zc[rows] = z_new
        X_prev[rows] = x
        X[rows] = x_new
        F_x[rows] = F_new
        fresh[rows[moved]] = False
        qn = eta * q[rows] + 1.0
        c[rows] = (eta * q[rows] * c[rows] + F_new) / qn
        q[rows] = qn
        res = _norms(step) / np.maximum(_norms(x_new), 1e-12)
        residual[rows] = res
        iters[rows] += 1
        if hist is not None:
            for j, r in enumerate(rows):
                hist[r].append(float(F_new[j]))
                rhist[r].append(float(res[j]))
        # the gradient at the extrapolated point screens for convergence;
        # the exact test at x_{k+1} only runs for rows that pass the screen
        near = rows if k % 10 == 9 else rows[(_norms(G_y) <= 2.0 * thresh[rows]) | ~moved]
        refresh(near)
        done = near[(_norms(G_x[near]) <= thresh[near]) | ~np.any(X[near] != X_prev[near], axis=-1)]
        active[done] = False
        t_prev, t = t, (math.sqrt(4.0 * t * t + 1.0) + 1.0) / 2.0

    refresh(np.arange(B))
    converged = _norms(G_x) <= thresh
    return X, iters, residual, converged, (hist, rhist)


def _tv_steps(L, cfg):
    sigma = cfg.sigma
    tau = cfg.tau
    if sigma is None and tau is None:
        sigma = max(L, 1e-12) / GRADIENT_NORM_SQ
    if tau is None:
        tau = 1.0 / (L + sigma * GRADIENT_NORM_SQ)
    if sigma is None:
        sigma = (1.0 / tau - L) / GRADIENT_NORM_SQ
    if not (tau > 0 and sigma > 0) or tau * L + tau * sigma * GRADIENT_NORM_SQ > 1.0 + 1e-12:
        raise ValueError(f"PDHG steps tau={tau}, sigma={sigma} violate tau*L + tau*sigma*8 <= 1 (L={L:.4g})")
    return tau, sigma


def pdhg_batch(A, Y, alpha, cfg: ReconConfig, shape=None, X0=None):
    """Primal-dual (Condat-Vu) iterations for TV-regularised least squares on a batch.

    ``alpha`` may be a scalar or one weight per row.
    """
    a = as_matrix(A)
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    B, N = Y.shape[0], a.shape[1]
    if Y.shape[1] != a.shape[0]:
        raise ValueError(f"measurements have length {Y.shape[1]}, matrix has {a.shape[0]} rows")
    alphas = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (B,))
    if not np.all(alphas > 0):
        raise ValueError("alpha must be positive")
    shape = _shape_for(N, shape)
    tv = TotalVariation()
    tau, sigma = _tv_steps(spectral_norm_sq(a), cfg)

    def objective(X, rows):
        r = X @ a.T - Y[rows]
        return 0.5 * np.sum(r * r, axis=-1) + alphas[rows] * tv.value(X.reshape((-1,) + shape))

    X = initial_guess(a, Y) if X0 is None else np.array(np.broadcast_to(X0, (B, N)), dtype=np.float64)
    P = np.zeros((B, 2) + shape)
    E0 = objective(X, np.arange(B))
    limit = 10.0 * np.maximum(E0, 1e-300)
    iters = np.zeros(B, dtype=int)
    residual = np.full(B, np.inf)
    dual_residual = np.full(B, np.inf)
    active = np.ones(B, dtype=bool)
    hist = [[float(e)] for e in E0] if cfg.record_history else None
    rhist = [[] for _ in range(B)] if cfg.record_history else None

    for k in range(cfg.max_iters):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        x, p = X[rows], P[rows]
        g = (x @ a.T - Y[rows]) @ a + image_gradient_adjoint(p).reshape(rows.size, N)
        x_new = x - tau * g
        bar = (2.0 * x_new - x).reshape((-1,) + shape)
        p_new = tv.project_dual(p + sigma * image_gradient(bar), alphas[rows, None, None])
        dres = _norms((p_new - p).reshape(rows.size, -1)) / np.maximum(_norms(p_new.reshape(rows.size, -1)), 1e-12)
        P[rows] = p_new
        dual_residual[rows] = dres
        X[rows] = x_new
        res = _norms(x_new - x) / np.maximum(_norms(x_new), 1e-12)
        residual[rows] = res
        iters[rows] += 1
        if hist is not None or k % 10 == 0 or k == cfg.max_iters - 1:
            E = objective(x_new, rows)
            if k == 0:
                # the first primal step can leave a poor back-projection start far behind; reference both
                limit[rows] = np.maximum(limit[rows], 10.0 * E)
            if not np.all(np.isfinite(E)) or np.any(E > limit[rows]):
                raise SolverError("PDHG diverged: objective grew by more than 10x its initial value")
            if hist is not None:
                for j, r in enumerate(rows):
                    hist[r].append(float(E[j]))
                    rhist[r].append(float(res[j]))
        # the dual change guards against a stationary primal while the dual is still moving
        active[rows] = (res >= cfg.tol) | (dres >= cfg.tol)

    if not np.all(np.isfinite(X)):
        raise SolverError("PDHG produced non-finite iterates")
    return X, iters, residual, (residual < cfg.tol) & (dual_residual < cfg.tol), (hist, rhist)


def _single(result, shape, N):
    X, iters, residual, converged, (hist, rhist) = result
    return ReconResult(
        x_hat=X[0].reshape(_shape_for(N, shape)),
        iterations=int(iters[0]),
        final_residual=float(residual[0]),
        converged=bool(converged[0]),
        objective_history=None if hist is None else hist[0],
        residual_history=None if rhist is None else rhist[0],
    )


def solve_tv_pdhg(A, y, alpha: float, cfg: ReconConfig | None = None, shape=None, x0=None) -> ReconResult:
    cfg = cfg or ReconConfig(solver=PDHG)
    a = as_matrix(A)
    out = pdhg_batch(a, _measurements(y)[None], alpha, cfg, shape, None if x0 is None else np.ravel(x0))
    return _single(out, shape, a.shape[1])


def solve_smooth_nmapg(A, y, alpha: float, J: Regulariser | None, cfg: ReconConfig | None = None,
                       shape=None, x0=None) -> ReconResult:
    cfg = cfg or ReconConfig()
    a = as_matrix(A)
    out = nmapg_batch(a, _measurements(y)[None], alpha, J, cfg, shape, None if x0 is None else np.ravel(x0))
    return _single(out, shape, a.shape[1])


def reconstruct_batch(A, Y, alpha: float, J: Regulariser, cfg: ReconConfig, shape=None, X0=None) -> np.ndarray:
    """Reconstruct every row of ``Y``; TV goes through PDHG, smooth priors through nmAPG."""
    if isinstance(J, TotalVariation) or cfg.solver == PDHG:
        if not isinstance(J, TotalVariation):
            raise ValueError("the PDHG solver is only wired for the TV regulariser")
        return pdhg_batch(A, Y, alpha, replace(cfg, solver=PDHG), shape, X0)[0]
    return nmapg_batch(A, Y, alpha, J, cfg, shape, X0)[0]


def energy(A, y, alpha, J, x) -> float:
    """Objective value ``0.5||Ax - y||^2 + alpha J(x)`` at a single image."""
    a = as_matrix(A)
    x = np.asarray(x, dtype=np.float64)
    r = a @ x.ravel() - _measurements(y)
    e = 0.5 * float(r @ r)
    if alpha > 0:
        e += alpha * float(J.value(x))
    return e


def step_operator_T(x, A, y, alpha: float, J: Regulariser | None, tau: float | None = None) -> np.ndarray:
    """One explicit gradient step ``x - tau (A^T(Ax - y) + alpha grad J(x))``.

    ``tau`` defaults to ``0.9 / L`` with ``L`` from :func:`lipschitz_estimate`.
    Fixed points of this map are exactly the stationary points of the energy.
    """
    a = as_matrix(A)
    x = np.asarray(x, dtype=np.float64)
    if tau is None:
        tau = 0.9 / lipschitz_estimate(a, alpha, J)
    g = ((a @ x.ravel() - _measurements(y)) @ a).reshape(x.shape)
    if alpha > 0:
        g = g + alpha * J.grad(x)
    return x - tau * g


def write_history_csv(result: ReconResult, path) -> None:
    if result.objective_history is None:
        raise ValueError("solve was run without record_history")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective", "residual"])
        res = [""] + list(result.residual_history or [])
        for i, obj in enumerate(result.objective_history):
            w.writerow([i, repr(float(obj)), "" if i == 0 else repr(float(res[i]))])
