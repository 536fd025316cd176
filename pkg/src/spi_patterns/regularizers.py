"""Regularisers for the variational reconstruction.

All operators act on the last two axes, so a single image ``(H, W)`` and a
batch ``(B, H, W)`` go through the same code. Values come back with the
leading batch shape (a scalar for a single image).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import check_images, make_rng

# ---------------------------------------------------------------------------
# finite differences


def image_gradient(x: np.ndarray) -> np.ndarray:
    """Forward differences with replicate boundary, shape ``(..., 2, H, W)``.

    Component 0 is the vertical (row) difference, component 1 the horizontal.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros(x.shape[:-2] + (2,) + x.shape[-2:])
    g[..., 0, :-1, :] = x[..., 1:, :] - x[..., :-1, :]
    g[..., 1, :, :-1] = x[..., :, 1:] - x[..., :, :-1]
    return g


def image_gradient_adjoint(p: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`image_gradient` (negative divergence)."""
    p0 = p[..., 0, :, :]
    p1 = p[..., 1, :, :]
    out = np.zeros(p.shape[:-3] + p.shape[-2:])
    out[..., :-1, :] -= p0[..., :-1, :]
    out[..., 1:, :] += p0[..., :-1, :]
    out[..., :, :-1] -= p1[..., :, :-1]
    out[..., :, 1:] += p1[..., :, :-1]
    return out


GRADIENT_NORM_SQ = 8.0  # upper bound on ||image_gradient||^2


def _magnitude(g):
    return np.sqrt(g[..., 0, :, :] ** 2 + g[..., 1, :, :] ** 2)


def tv_value(x) -> float | np.ndarray:
    """Isotropic total variation."""
    return np.sum(_magnitude(image_gradient(x)), axis=(-2, -1))


def huber_tv_value(x, delta: float = 0.01):
    if not delta > 0:
        raise ValueError("delta must be positive")
    m = _magnitude(image_gradient(x))
    h = np.where(m <= delta, m * m / (2 * delta), m - delta / 2)
    return np.sum(h, axis=(-2, -1))


def huber_tv_grad(x, delta: float = 0.01) -> np.ndarray:
    """Gradient of the Huber-smoothed isotropic TV."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    g = image_gradient(x)
    scale = np.maximum(_magnitude(g), delta)
    return image_gradient_adjoint(g / scale[..., None, :, :])


def huber_tv_hvp(x, v, delta: float = 0.01) -> np.ndarray:
    """Hessian-vector product of the Huber TV at ``x``."""
    g = image_gradient(x)
    d = image_gradient(v)
    m = _magnitude(g)
    inner = m <= delta
    m_safe = np.where(inner, 1.0, m)
    proj = (g[..., 0, :, :] * d[..., 0, :, :] + g[..., 1, :, :] * d[..., 1, :, :]) / m_safe**3
    out = np.where(inner[..., None, :, :], d / delta, d / m_safe[..., None, :, :] - g * proj[..., None, :, :])
    return image_gradient_adjoint(out)


# ---------------------------------------------------------------------------
# filter-bank prior

PENALTIES = ("log", "quadratic")


def _phi(t, penalty):
    if penalty == "log":
        return np.log1p(t * t)
    return 0.5 * t * t


def _dphi(t, penalty):
    if penalty == "log":
        return 2 * t / (1 + t * t)
    return t


def _ddphi(t, penalty):
    if penalty == "log":
        u = 1 + t * t
        return 2 * (1 - t * t) / (u * u)
    return np.ones_like(t)


_PHI_CURVATURE = {"log": 2.0, "quadratic": 1.0}


@dataclass
class FilterBank:
    """Bank of F correlation kernels with a smooth scalar penalty."""

    kernels: np.ndarray
    penalty: str = "log"

    def __post_init__(self):
        k = np.array(self.kernels, dtype=np.float64)
        if k.ndim == 2:
            k = k[None]
        if k.ndim != 3 or min(k.shape) < 1:
            raise ValueError(f"kernels must have shape (F, kh, kw), got {k.shape}")
        if not np.all(np.isfinite(k)):
            raise ValueError("kernels contain non-finite values")
        if self.penalty not in PENALTIES:
            raise ValueError(f"unknown penalty {self.penalty!r}")
        self.kernels = k

    @property
    def n_filters(self) -> int:
        return self.kernels.shape[0]

    @property
    def kernel_shape(self) -> tuple[int, int]:
        return self.kernels.shape[1], self.kernels.shape[2]

    def zero_mean(self) -> "FilterBank":
        return FilterBank(self.kernels - self.kernels.mean(axis=(1, 2), keepdims=True), self.penalty)

    def correlate(self, x) -> np.ndarray:
        """Valid correlation with every kernel, shape ``(..., F, H-kh+1, W-kw+1)``."""
        kh, kw = self.kernel_shape
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-2] < kh or x.shape[-1] < kw:
            raise ValueError(f"image {x.shape[-2:]} smaller than kernel {(kh, kw)}")
        win = sliding_window_view(x, (kh, kw), axis=(-2, -1))
        return np.einsum("...ijkl,fkl->...fij", win, self.kernels, optimize=True)

    def correlate_adjoint(self, u) -> np.ndarray:
        """Adjoint of :meth:`correlate`: sum of full convolutions."""
        F, kh, kw = self.kernels.shape
        h, w = u.shape[-2:]
        # mix filters first, then scatter-add one shifted slice per kernel tap
        taps = np.moveaxis(u, -3, -1) @ self.kernels.reshape(F, -1)
        out = np.zeros(u.shape[:-3] + (h + kh - 1, w + kw - 1))
        for a in range(kh):
            for b in range(kw):
                out[..., a:a + h, b:b + w] += taps[..., a * kw + b]
        return out

    def operator_norm_sq(self, size: int = 128) -> float:
        """Spectral bound max_w sum_f |K_f(w)|^2 on a ``size`` x ``size`` frequency grid."""
        spec = np.fft.fft2(self.kernels, s=(size, size))
        return float(np.max(np.sum(np.abs(spec) ** 2, axis=0)))


def learned_value_grad(x, fb: FilterBank):
    """Value ``sum_f sum_p phi((k_f * x)_p)`` and its gradient w.r.t. ``x``."""
    c = fb.correlate(x)
    value = np.sum(_phi(c, fb.penalty), axis=(-3, -2, -1))
    grad = fb.correlate_adjoint(_dphi(c, fb.penalty))
    return value, grad


def _filter_vjp(fb: FilterBank, z, v):
    """d/dK of <v, grad_x J(z; K)> summed over the batch, shape ``(F, kh, kw)``."""
    kh, kw = fb.kernel_shape
    c = fb.correlate(z)
    cv = fb.correlate(v)
    wz = sliding_window_view(z, (kh, kw), axis=(-2, -1))
    wv = sliding_window_view(v, (kh, kw), axis=(-2, -1))
    t1 = np.einsum("bijkl,bfij->fkl", wv, _dphi(c, fb.penalty), optimize=True)
    t2 = np.einsum("bijkl,bfij->fkl", wz, cv * _ddphi(c, fb.penalty), optimize=True)
    return t1 + t2


# ---------------------------------------------------------------------------
# the common interface


class Regulariser:
    """Base class. Smooth subclasses provide ``value``, ``grad`` and ``lipschitz``."""

    kind = ""
    smooth = True

    def value(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def value_grad(self, x):
        return self.value(x), self.grad(x)

    def lipschitz(self) -> float:
        raise NotImplementedError


class TotalVariation(Regulariser):
    """Non-smooth isotropic TV; only usable with the primal-dual solver."""

    kind = "tv"
    smooth = False

    def value(self, x):
        return tv_value(x)

    def project_dual(self, p, radius):
        """Pointwise projection of the dual field onto the ball of given radius."""
        m = _magnitude(p)
        return p / np.maximum(1.0, m / radius)[..., None, :, :]

    def __repr__(self):
        return "TotalVariation()"


class HuberTV(Regulariser):
    kind = "huber"

    def __init__(self, delta: float = 0.01):
        if not delta > 0:
            raise ValueError("delta must be positive")
        self.delta = float(delta)

    def value(self, x):
        return huber_tv_value(x, self.delta)

    def grad(self, x):
        return huber_tv_grad(x, self.delta)

    def hvp(self, x, v):
        return huber_tv_hvp(x, v, self.delta)

    def lipschitz(self) -> float:
        return GRADIENT_NORM_SQ / self.delta

    def __repr__(self):
        return f"HuberTV(delta={self.delta})"


class LearnedConv(Regulariser):
    """Fields-of-Experts style prior ``sum_f sum_p phi(k_f * x)``."""

    kind = "learned"

    def __init__(self, filters: FilterBank):
        self.filters = filters
        self._lip = None

    def value(self, x):
        return np.sum(_phi(self.filters.correlate(x), self.filters.penalty), axis=(-3, -2, -1))

    def grad(self, x):
        return learned_value_grad(x, self.filters)[1]

    def value_grad(self, x):
        return learned_value_grad(x, self.filters)

    def hvp(self, x, v):
        fb = self.filters
        return fb.correlate_adjoint(_ddphi(fb.correlate(x), fb.penalty) * fb.correlate(v))

    def lipschitz(self) -> float:
        if self._lip is None:
            self._lip = _PHI_CURVATURE[self.filters.penalty] * self.filters.operator_norm_sq()
        return self._lip

    def __repr__(self):
        fb = self.filters
        return f"LearnedConv(F={fb.n_filters}, kernel={fb.kernel_shape}, penalty={fb.penalty!r})"


# ---------------------------------------------------------------------------
# offline prior training


@dataclass
class PretrainConfig:
    n_filters: int = 8
    kernel_size: int = 5
    penalty: str = "log"
    weight: float = 1.0
    noise_sigma: float = 0.05
    unroll_steps: int = 20
    epochs: int = 150
    lr: float = 1e-2
    init_scale: float = 1.0
    seed: int = 0
    init_filters: np.ndarray | None = field(default=None, repr=False)


def dct_filters(n_filters: int, k: int, scale: float = 1.0) -> np.ndarray:
    """Lowest-frequency non-constant 2-D DCT-II atoms, each scaled to unit l2 norm."""
    if n_filters > k * k - 1:
        raise ValueError(f"at most {k * k - 1} non-constant DCT atoms of size {k}")
    n = np.arange(k)
    basis = np.array([np.cos(np.pi * (n + 0.5) * u / k) for u in range(k)])
    pairs = sorted(((u, v) for u in range(k) for v in range(k) if u or v), key=lambda t: (t[0] + t[1], max(t), t))
    atoms = []
    for u, v in pairs[:n_filters]:
        a = np.outer(basis[u], basis[v])
        a -= a.mean()
        atoms.append(scale * a / np.linalg.norm(a))
    return np.array(atoms)


def _unrolled_denoise(fb, weight, noisy, steps, keep=False):
    step = 1.0 / (1.0 + weight * _PHI_CURVATURE[fb.penalty] * fb.operator_norm_sq())
    z = noisy.copy()
    traj = [z] if keep else None
    for _ in range(steps):
        z = z - step * ((z - noisy) + weight * learned_value_grad(z, fb)[1])
        if keep:
            traj.append(z)
    return z, traj, step


def _noisy_copies(images, sigma, seed, epoch):
    rng = make_rng(seed, 1, epoch)
    return images + sigma * rng.standard_normal(images.shape)


def denoise_mse(fb: FilterBank, images, cfg: PretrainConfig, epoch: int = 0) -> float:
    """Mean squared error of the unrolled denoiser on ``images`` (noise keyed by ``cfg.seed``, ``epoch``)."""
    X = check_images(images)
    z, _, _ = _unrolled_denoise(fb, cfg.weight, _noisy_copies(X, cfg.noise_sigma, cfg.seed, epoch), cfg.unroll_steps)
    return float(np.mean((z - X) ** 2))


def pretrain_filters(corpus, cfg: PretrainConfig | None = None, *, history: list | None = None) -> FilterBank:
    """Fit a filter bank by minimising the MSE of an unrolled gradient-descent denoiser.

    Each epoch draws fresh Gaussian noise, runs ``cfg.unroll_steps`` explicit
    steps on ``0.5||z - b||^2 + weight * J(z)`` from ``z = b`` and back-propagates
    the denoising error through the unrolled steps to the kernels. Kernels are
    re-projected to zero mean after every update.
    """
    cfg = cfg or PretrainConfig()
    X = check_images(corpus)
    if np.all(np.ptp(X, axis=(1, 2)) == 0):
        raise ValueError("degenerate corpus: every image is constant, nothing to learn")
    k = cfg.kernel_size
    if cfg.init_filters is not None:
        K = np.array(cfg.init_filters, dtype=np.float64)
        if K.ndim == 2:
            K = K[None]
    else:
        K = dct_filters(cfg.n_filters, k, cfg.init_scale)
        K = K + 0.01 * cfg.init_scale * make_rng(cfg.seed, 0).standard_normal(K.shape)
    fb = FilterBank(K, cfg.penalty).zero_mean()

    m = np.zeros_like(fb.kernels)
    v = np.zeros_like(fb.kernels)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for epoch in range(cfg.epochs):
        noisy = _noisy_copies(X, cfg.noise_sigma, cfg.seed, epoch)
        z, traj, step = _unrolled_denoise(fb, cfg.weight, noisy, cfg.unroll_steps, keep=True)
        loss = float(np.mean((z - X) ** 2))
        lam = 2.0 * (z - X) / X.size
        gK = np.zeros_like(fb.kernels)
        for t in range(cfg.unroll_steps - 1, -1, -1):
            zt = traj[t]
            gK -= step * cfg.weight * _filter_vjp(fb, zt, lam)
            c = fb.correlate(zt)
            hv = fb.correlate_adjoint(_ddphi(c, fb.penalty) * fb.correlate(lam))
            lam = lam - step * (lam + cfg.weight * hv)
        gK -= gK.mean(axis=(1, 2), keepdims=True)
        if history is not None:
            history.append(loss)
        m = b1 * m + (1 - b1) * gK
        v = b2 * v + (1 - b2) * gK * gK
        mh = m / (1 - b1 ** (epoch + 1))
        vh = v / (1 - b2 ** (epoch + 1))
        fb = FilterBank(fb.kernels - cfg.lr * mh / (np.sqrt(vh) + eps), cfg.penalty).zero_mean()
    return fb


def make_regulariser(kind: str, *, delta: float = 0.01, filters: FilterBank | None = None) -> Regulariser:
    if kind == "tv":
        return TotalVariation()
    if kind == "huber":
        return HuberTV(delta)
    if kind == "learned":
        if filters is None:
            raise ValueError("the learned regulariser needs a filter bank")
        return LearnedConv(filters)
    raise ValueError(f"unknown regulariser {kind!r}")
