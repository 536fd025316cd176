"""Upper-level gradients: Jacobian-free backpropagation and reference oracles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import as_matrix
from .regularizers import Regulariser
from .solvers import ReconConfig, lipschitz_estimate, nmapg_batch, step_operator_T


@dataclass
class UpperGradient:
    grad_A: np.ndarray
    grad_log_alpha: float
    grad_alpha: float = 0.0
    fixed_point_residual: float = 0.0
    not_converged: bool = False


def upper_loss(x_true, x_hat):
    """Per-pixel squared error ``0.5 ||x_hat - x_true||^2 / N`` and its gradient in ``x_hat``."""
    x_true = np.asarray(x_true, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x_true.shape != x_hat.shape:
        raise ValueError(f"dimension mismatch: {x_true.shape} vs {x_hat.shape}")
    d = x_hat - x_true
    n = d.size
    return 0.5 * float(np.sum(d * d)) / n, d / n


def _vjp_reg_grad(J, X_hat, shape):
    return J.grad(X_hat.reshape((X_hat.shape[0],) + shape)).reshape(X_hat.shape)


def jfb_gradients(X_hat, A, Y, X_true, alpha: float, J: Regulariser | None, upstream, tau: float, shape):
    """Sum over rows of the JFB parameter gradients.

    With ``v = -tau * upstream`` and ``r = A x_hat - y`` each row contributes
    ``r v^T + (A v)(x_hat - x_true)^T`` to ``grad_A`` (the second term is the
    dependence of the simulated measurement on A at fixed noise) and
    ``<v, grad J(x_hat)>`` to ``grad_alpha``.
    """
    a = as_matrix(A)
    X_hat = np.atleast_2d(X_hat)
    V = -tau * np.atleast_2d(upstream)
    R = X_hat @ a.T - np.atleast_2d(Y)
    grad_A = R.T @ V
    if X_true is not None:
        grad_A = grad_A + (V @ a.T).T @ (X_hat - np.atleast_2d(X_true))
    grad_alpha = 0.0
    if alpha > 0 and J is not None:
        grad_alpha = float(np.sum(V * _vjp_reg_grad(J, X_hat, shape)))
    return grad_A, grad_alpha


def jfb_gradient(x_hat, A, y, x_true, alpha: float, J: Regulariser | None, upstream,
                 tau: float | None = None, tol: float = 1e-4) -> UpperGradient:
    """Zero-order Neumann (Jacobian-free) approximation of the upper gradient.

    ``x_hat`` should be a fixed point of :func:`step_operator_T`; if its
    relative fixed-point residual exceeds ``tol`` the result is flagged.
    Pass ``x_true=None`` to drop the measurement path through ``y = A x_true + n``.
    """
    a = as_matrix(A)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    y = np.asarray(getattr(y, "y", y), dtype=np.float64)
    if tau is None:
        tau = 0.9 / lipschitz_estimate(a, alpha, J)
    Tx = step_operator_T(x_hat, a, y, alpha, J, tau)
    fp_res = float(np.linalg.norm(Tx - x_hat) / max(np.linalg.norm(x_hat), 1e-12))
    grad_A, grad_alpha = jfb_gradients(
        x_hat.reshape(1, -1), a, y[None], None if x_true is None else np.reshape(x_true, (1, -1)),
        alpha, J, np.reshape(upstream, (1, -1)), tau, x_hat.shape)
    return UpperGradient(grad_A, alpha * grad_alpha, grad_alpha, fp_res, fp_res > tol)


ORACLE_CFG = ReconConfig(max_iters=200_000, tol=1e-10)


def _tight_solve(a, y, alpha, J, shape, cfg, x0):
    X = nmapg_batch(a, y[None], alpha, J, cfg, shape, x0)[0][0]
    smooth_part = alpha > 0 and J is not None
    hvp = getattr(J, "hvp", None)
    N = a.shape[1]
    if N > 256 or (smooth_part and hvp is None) or (not smooth_part and a.shape[0] < N):
        return X
    # a few Newton steps on the (small) dense Hessian remove the solver's last digits of error
    ata = a.T @ a
    for _ in range(3):
        g = (a @ X - y) @ a
        H = ata.copy()
        if smooth_part:
            g = g + alpha * J.grad(X.reshape(shape)).ravel()
            eye = np.eye(N).reshape((N,) + shape)
            H = H + alpha * hvp(np.broadcast_to(X.reshape(shape), eye.shape), eye).reshape(N, N)
        try:
            X = X - np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
    return X


def upper_objective(A, alpha, x_true, noise, J, cfg=ORACLE_CFG, shape=None, x0=None):
    """``L(A, alpha)`` for one image with a frozen noise draw; returns ``(loss, x_hat)``."""
    a = as_matrix(A)
    x_true = np.asarray(x_true, dtype=np.float64)
    shape = shape or x_true.shape
    y = a @ x_true.ravel() + noise
    x_hat = _tight_solve(a, y, alpha, J, shape, cfg, x0)
    return upper_loss(x_true.ravel(), x_hat)[0], x_hat


def fd_oracle_gradient(A, alpha: float, x_true, noise, J: Regulariser | None, h: float = 1e-5,
                       cfg: ReconConfig = ORACLE_CFG, shape=None, entries=True) -> UpperGradient:
    """Central finite differences of the upper loss in every entry of A and in log(alpha).

    Each perturbed lower-level problem is re-solved tightly from the
    unperturbed solution; the noise vector is held fixed throughout.
    """
    a = np.array(as_matrix(A), dtype=np.float64)
    x_true = np.asarray(x_true, dtype=np.float64)
    if x_true.size > 64:
        raise ValueError("finite-difference oracle is limited to N <= 64")
    shape = shape or x_true.shape
    noise = np.asarray(noise, dtype=np.float64)
    _, x0 = upper_objective(a, alpha, x_true, noise, J, cfg, shape)

    def L(mat, alph):
        val, _ = upper_objective(mat, alph, x_true, noise, J, cfg, shape, x0)
        if not np.isfinite(val):
            raise ValueError("non-finite loss at a perturbed point")
        return val

    grad_A = np.zeros_like(a)
    if entries:
        for idx in np.ndindex(a.shape):
            ap, am = a.copy(), a.copy()
            ap[idx] += h
            am[idx] -= h
            grad_A[idx] = (L(ap, alpha) - L(am, alpha)) / (2 * h)
    g_log = 0.0
    if alpha > 0:
        g_log = (L(a, alpha * np.exp(h)) - L(a, alpha * np.exp(-h))) / (2 * h)
    return UpperGradient(grad_A, g_log, g_log / alpha if alpha > 0 else 0.0)


def implicit_gradient_dense(A, alpha: float, x_true, noise, J: Regulariser | None,
                            cfg: ReconConfig = ORACLE_CFG, shape=None) -> UpperGradient:
    """Exact implicit-function gradient via a dense Hessian solve (small problems only).

    Used to cross-check the finite-difference oracle; JFB replaces the
    inverse Hessian below by ``tau * I``.
    """
    a = as_matrix(A)
    x_true = np.asarray(x_true, dtype=np.float64)
    shape = shape or x_true.shape
    N = a.shape[1]
    _, x_hat = upper_objective(a, alpha, x_true, noise, J, cfg, shape)
    _, up = upper_loss(x_true.ravel(), x_hat)
    H = a.T @ a
    if alpha > 0:
        eye = np.eye(N).reshape((N,) + shape)
        H = H + alpha * J.hvp(np.broadcast_to(x_hat.reshape(shape), eye.shape), eye).reshape(N, N)
    w = np.linalg.solve(H, up)
    # dT/dtheta with tau = 1 and the inverse (I - dT/dx)^{-1} = H^{-1}
    grad_A, grad_alpha = jfb_gradients(x_hat, a, a @ x_true.ravel() + noise, x_true.ravel(), alpha, J, w, 1.0, shape)
    return UpperGradient(grad_A, alpha * grad_alpha, grad_alpha)
