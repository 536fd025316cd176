"""Domain types, forward measurement simulation and image-quality metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BINARY = "binary"
REAL = "real"


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *keys)``.

    Every independent stream (an epoch shuffle, the noise for one image in
    one epoch, ...) gets its own key tuple, so results never depend on how
    work is split into batches or workers.
    """
    if seed < 0 or any(k < 0 for k in keys):
        raise ValueError("seed and stream keys must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


def check_image(x, *, clip: bool = True) -> np.ndarray:
    """Validate a single grayscale image and return it as a float64 2-D array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.size == 0:
        raise ValueError(f"expected a non-empty 2-D image, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("image contains non-finite values")
    if clip:
        x = np.clip(x, 0.0, 1.0)
    return x


def check_images(X, *, clip: bool = True) -> np.ndarray:
    """Validate a stack of equally-sized images, returning shape ``(n, H, W)``."""
    if isinstance(X, (list, tuple)):
        shapes = {np.shape(x) for x in X}
        if len(shapes) > 1:
            raise ValueError(f"images do not share dimensions: {sorted(shapes)}")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[0] == 0 or X.shape[1] == 0 or X.shape[2] == 0:
        raise ValueError(f"expected images of shape (n, H, W), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    if clip:
        X = np.clip(X, 0.0, 1.0)
    return X


@dataclass(frozen=True)
class SensingMatrix:
    """M x N sensing matrix whose rows are vectorised illumination patterns."""

    entries: np.ndarray
    kind: str = REAL

    def __post_init__(self):
        a = np.array(self.entries, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(f"sensing matrix must be 2-D with M, N >= 1, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("sensing matrix has non-finite entries")
        if self.kind not in (BINARY, REAL):
            raise ValueError(f"unknown matrix kind {self.kind!r}")
        if self.kind == BINARY and not np.all(np.abs(a) == 1.0):
            raise ValueError("binary sensing matrix must have entries in {-1, +1}")
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def M(self) -> int:
        return self.entries.shape[0]

    @property
    def N(self) -> int:
        return self.entries.shape[1]

    @property
    def is_binary(self) -> bool:
        return self.kind == BINARY

    def __eq__(self, other):
        if not isinstance(other, SensingMatrix):
            return NotImplemented
        return self.kind == other.kind and np.array_equal(self.entries, other.entries)

    __hash__ = None


def as_matrix(A) -> np.ndarray:
    """Plain float array view of a SensingMatrix or array-like."""
    if isinstance(A, SensingMatrix):
        return A.entries
    a = np.asarray(A, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"sensing matrix must be 2-D, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class MeasurementSet:
    y: np.ndarray
    sigma: float
    seed: int | None = None
    noise_level: float = 0.0

    def __post_init__(self):
        y = np.array(self.y, dtype=np.float64).reshape(-1)
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        y.setflags(write=False)
        object.__setattr__(self, "y", y)

    @property
    def M(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class QualityReport:
    psnr: float
    ssim: float
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not -1.0 - 1e-12 <= self.ssim <= 1.0 + 1e-12:
            raise ValueError(f"ssim out of range: {self.ssim}")


def noise_sigma(clean: np.ndarray, noise_level: float) -> float:
    """Relative-RMS noise level: ``noise_level * ||Ax|| / sqrt(M)``."""
    clean = np.asarray(clean)
    return float(noise_level * np.linalg.norm(clean) / np.sqrt(clean.shape[-1]))


def simulate_measurements(A, x, noise_level: float = 0.05, seed: int = 0) -> MeasurementSet:
    """Simulate ``y = A x + n`` with i.i.d. Gaussian noise of relative RMS level."""
    a = as_matrix(A)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if a.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: A has {a.shape[1]} columns, image has {x.shape[0]} pixels")
    if noise_level < 0:
        raise ValueError("noise_level must be non-negative")
    clean = a @ x
    sigma = noise_sigma(clean, noise_level)
    y = clean + sigma * make_rng(seed).standard_normal(a.shape[0])
    if not np.all(np.isfinite(y)):
        raise ValueError("simulated measurements are not finite")
    return MeasurementSet(y=y, sigma=sigma, seed=seed, noise_level=noise_level)


def _pair(reference, test):
    ref = np.asarray(reference, dtype=np.float64)
    tst = np.asarray(test, dtype=np.float64)
    if ref.shape != tst.shape:
        raise ValueError(f"dimension mismatch: {ref.shape} vs {tst.shape}")
    return ref, tst


def psnr(reference, test) -> float:
    """Peak signal-to-noise ratio in dB with peak value 1; ``inf`` when identical."""
    ref, tst = _pair(reference, test)
    mse = float(np.mean((ref - tst) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _gaussian_kernel1d(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-(t**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable "valid" correlation with a symmetric kernel
    k = g.shape[0]
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=-1) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-2) @ g


def ssim_map(reference, test, data_range: float = 1.0) -> np.ndarray:
    ref, tst = _pair(reference, test)
    if ref.ndim != 2 or min(ref.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs 2-D images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {ref.shape}")
    g = _gaussian_kernel1d()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu1 = _filter_valid(ref, g)
    mu2 = _filter_valid(tst, g)
    s11 = _filter_valid(ref * ref, g) - mu1 * mu1
    s22 = _filter_valid(tst * tst, g) - mu2 * mu2
    s12 = _filter_valid(ref * tst, g) - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return num / den


def ssim(reference, test) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5, K1=0.01, K2=0.03, L=1)."""
    return float(np.clip(np.mean(ssim_map(reference, test)), -1.0, 1.0))


def quality(reference, test) -> QualityReport:
    return QualityReport(psnr=psnr(reference, test), ssim=ssim(reference, test))
