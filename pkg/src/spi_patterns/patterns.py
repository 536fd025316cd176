"""Baseline sensing matrices and the binarisation strategies used in training."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import hadamard

from .core import BINARY, REAL, SensingMatrix, make_rng

SIGN_STE = "sign_ste"
TANH = "tanh"
PROJECTED_BOX = "projected_box"
PARAMETERISATIONS = (SIGN_STE, TANH, PROJECTED_BOX)


def _check_size(M, N):
    if int(M) != M or int(N) != N or M < 1 or N < 1:
        raise ValueError(f"M and N must be positive integers, got M={M}, N={N}")


def gaussian_matrix(M: int, N: int, seed: int = 0) -> SensingMatrix:
    """Dense matrix with i.i.d. N(0, 1/N) entries."""
    _check_size(M, N)
    a = make_rng(seed).standard_normal((M, N)) / np.sqrt(N)
    return SensingMatrix(a, REAL)


def scrambled_hadamard(M: int, N: int, seed: int = 0) -> SensingMatrix:
    """M distinct rows of a column-permuted Sylvester-Hadamard matrix."""
    _check_size(M, N)
    if N & (N - 1):
        raise ValueError(f"N must be a power of two, got {N}")
    if M > N:
        raise ValueError(f"M={M} exceeds N={N}")
    rng = make_rng(seed)
    cols = rng.permutation(N)
    rows = rng.permutation(N)[:M]  # nested across M for a fixed seed
    H = hadamard(N).astype(np.float64)
    return SensingMatrix(H[np.ix_(rows, cols)], BINARY)


def identity_matrix(N: int) -> SensingMatrix:
    _check_size(N, N)
    return SensingMatrix(np.eye(N), REAL)


def sign(z) -> np.ndarray:
    """Entry-wise sign with sgn(0) = +1."""
    return np.where(np.asarray(z) >= 0, 1.0, -1.0)


@dataclass
class LatentPattern:
    """Real latent matrix Z together with the map that turns it into A.

    ``beta`` scales the surrogate slope, ``tanh'(beta * Z)``; it stays at 1
    unless explicitly configured.
    """

    Z: np.ndarray
    parameterisation: str = SIGN_STE
    beta: float = 1.0

    def __post_init__(self):
        self.Z = np.array(self.Z, dtype=np.float64)
        if self.Z.ndim != 2:
            raise ValueError("latent matrix must be 2-D")
        if self.parameterisation not in PARAMETERISATIONS:
            raise ValueError(f"unknown parameterisation {self.parameterisation!r}")
        if not np.all(np.isfinite(self.Z)):
            raise ValueError("latent matrix has non-finite entries")

    @property
    def shape(self):
        return self.Z.shape

    def materialise(self) -> SensingMatrix:
        return materialise(self)


def init_latent(M: int, N: int, seed: int = 0, parameterisation: str = SIGN_STE,
                scale: float = 0.1, warm_start: SensingMatrix | None = None,
                beta: float = 1.0) -> LatentPattern:
    """Random latent initialisation, or a warm start ``atanh(0.99 * A0)``."""
    if warm_start is not None:
        a0 = warm_start.entries if isinstance(warm_start, SensingMatrix) else np.asarray(warm_start, float)
        if a0.shape != (M, N):
            raise ValueError(f"warm start has shape {a0.shape}, expected {(M, N)}")
        Z = np.arctanh(0.99 * np.clip(a0, -1.0, 1.0))
    else:
        _check_size(M, N)
        Z = scale * make_rng(seed).standard_normal((M, N))
    return LatentPattern(Z, parameterisation, beta)


def materialise(p: LatentPattern) -> SensingMatrix:
    if p.parameterisation == SIGN_STE:
        return SensingMatrix(sign(p.Z), BINARY)
    if p.parameterisation == TANH:
        return SensingMatrix(np.tanh(p.Z), REAL)
    return SensingMatrix(np.clip(p.Z, -1.0, 1.0), REAL)


def binarisation_backward(p: LatentPattern, grad_A) -> np.ndarray:
    """Pull a gradient w.r.t. the materialised A back to the latent Z.

    SignSTE uses the tanh' surrogate in place of the zero derivative of sign;
    for the tanh reparameterisation the same formula is the exact chain rule.
    """
    grad_A = np.asarray(grad_A, dtype=np.float64)
    if grad_A.shape != p.Z.shape:
        raise ValueError(f"gradient shape {grad_A.shape} does not match latent {p.Z.shape}")
    if p.parameterisation == PROJECTED_BOX:
        return np.where(np.abs(p.Z) <= 1.0, grad_A, 0.0)
    t = np.tanh(p.beta * p.Z)
    return grad_A * p.beta * (1.0 - t * t)


def binary_penalty(A, eps: float):
    """Exact penalty ``(1/eps) * sum(1 - a^2)`` and its gradient."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    a = np.asarray(A.entries if isinstance(A, SensingMatrix) else A, dtype=np.float64)
    value = float(np.sum(1.0 - a * a) / eps)
    return value, -2.0 * a / eps


def finalise_rnp(A):
    """Round a relaxed matrix to ±1.

    Returns the binary matrix and the fraction of entries with |a| < 0.99,
    a diagnostic of how far the relaxation was from binary.
    """
    a = np.asarray(A.entries if isinstance(A, SensingMatrix) else A, dtype=np.float64)
    frac = float(np.mean(np.abs(a) < 0.99))
    return SensingMatrix(sign(a), BINARY), frac


@dataclass(frozen=True)
class EpsilonSchedule:
    eps0: float = 1.0
    decay: float = 0.5
    period: int = 1
    eps_min: float = 1e-3

    def __post_init__(self):
        if not self.eps0 > 0 or not self.eps_min > 0:
            raise ValueError("eps0 and eps_min must be positive")
        if not 0 < self.decay < 1:
            raise ValueError("decay must lie in (0, 1)")
        if self.period < 1:
            raise ValueError("period must be >= 1")

    @classmethod
    def default(cls, total_steps: int) -> "EpsilonSchedule":
        return cls(period=max(1, math.ceil(total_steps / 8)))

    def __call__(self, step: int) -> float:
        return max(self.eps0 * self.decay ** (step // self.period), self.eps_min)
