"""scikit-learn style wrappers around pattern learning and reconstruction."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import SensingMatrix, psnr
from .regularizers import FilterBank, make_regulariser
from .solvers import PDHG, ReconConfig
from .trainer import (
    EVAL_NOISE, STE, TrainConfig, simulate_images, default_alpha_grid, select_alpha_grid, solve_rows, train,
)


def _images(X, image_shape):
    """Accept ``(n, H, W)`` or ``(n, H*W)`` input; return ``(n, H, W)`` floats in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        n, H, W = X.shape
        flat = check_array(X.reshape(n, H * W))
        return np.clip(flat, 0, 1).reshape(n, H, W)
    flat = check_array(X)
    if image_shape is None:
        side = int(round(np.sqrt(flat.shape[1])))
        if side * side != flat.shape[1]:
            raise ValueError("flat input needs image_shape for non-square images")
        image_shape = (side, side)
    return np.clip(flat, 0, 1).reshape((len(flat),) + tuple(image_shape))


class _PriorMixin:
    def _regulariser(self):
        fb = self.filters
        if fb is not None and not isinstance(fb, FilterBank):
            fb = FilterBank(np.asarray(fb))
        return make_regulariser(self.regulariser, delta=self.delta, filters=fb)


class SPIReconstructor(_PriorMixin, BaseEstimator):
    """Variational reconstruction for a fixed sensing matrix.

    ``fit`` only selects ``alpha`` (by mean SSIM over ``alpha_grid``) when
    ``alpha`` is None; ``predict`` maps measurement rows to images.
    """

    def __init__(self, pattern=None, alpha=None, regulariser="huber", filters=None, delta=0.01,
                 alpha_grid=None, noise_level=0.05, max_iters=2000, tol=1e-7, image_shape=None, random_state=0):
        self.pattern = pattern
        self.alpha = alpha
        self.regulariser = regulariser
        self.filters = filters
        self.delta = delta
        self.alpha_grid = alpha_grid
        self.noise_level = noise_level
        self.max_iters = max_iters
        self.tol = tol
        self.image_shape = image_shape
        self.random_state = random_state

    def _recon(self):
        return ReconConfig(max_iters=self.max_iters, tol=self.tol,
                           solver=PDHG if self.regulariser == "tv" else "nmapg")

    def fit(self, X, y=None):
        if self.pattern is None:
            raise ValueError("pattern must be set before fitting")
        A = self.pattern if isinstance(self.pattern, SensingMatrix) else SensingMatrix(np.asarray(self.pattern))
        J = self._regulariser()
        images = _images(X, self.image_shape)
        if self.alpha is None:
            grid = default_alpha_grid(A, J) if self.alpha_grid is None else self.alpha_grid
            self.alpha_ = select_alpha_grid(A, images, grid, self._recon(), J, self.noise_level, self.random_state)
        else:
            self.alpha_ = float(self.alpha)
        self.pattern_ = A
        self.image_shape_ = images.shape[1:]
        self.regulariser_ = J
        return self

    def predict(self, Y):
        check_is_fitted(self, "alpha_")
        Y = check_array(Y)
        if Y.shape[1] != self.pattern_.M:
            raise ValueError(f"expected {self.pattern_.M} measurements per row, got {Y.shape[1]}")
        X = solve_rows(self.pattern_, Y, self.alpha_, self.regulariser_, self._recon(), self.image_shape_)
        return X.reshape((len(X),) + self.image_shape_)

    def score(self, X, y=None):
        """Mean PSNR of reconstructions from freshly simulated measurements of ``X``."""
        check_is_fitted(self, "alpha_")
        images = _images(X, self.image_shape)
        Y = simulate_images(self.pattern_, images, self.noise_level, self.random_state, EVAL_NOISE)
        rec = np.clip(self.predict(Y), 0, 1)
        return float(np.mean([psnr(a, b) for a, b in zip(images, rec)]))


class PatternLearner(_PriorMixin, TransformerMixin, BaseEstimator):
    """Learn binary illumination patterns on a training corpus.

    ``transform`` simulates noisy measurements with the learned pattern and
    ``inverse_transform`` reconstructs images from them.
    """

    def __init__(self, n_patterns=64, method=STE, epochs=30, batch_size=8, lr_Z=1e-2, lr_logalpha=1e-2,
                 noise_level=0.05, regulariser="huber", filters=None, delta=0.01, max_iters=500, tol=1e-5,
                 image_shape=None, random_state=0):
        self.n_patterns = n_patterns
        self.method = method
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_Z = lr_Z
        self.lr_logalpha = lr_logalpha
        self.noise_level = noise_level
        self.regulariser = regulariser
        self.filters = filters
        self.delta = delta
        self.max_iters = max_iters
        self.tol = tol
        self.image_shape = image_shape
        self.random_state = random_state

    def fit(self, X, y=None):
        images = _images(X, self.image_shape)
        J = self._regulariser()
        cfg = TrainConfig(method=self.method, M=self.n_patterns, epochs=self.epochs, batch_size=self.batch_size,
                          lr_Z=self.lr_Z, lr_logalpha=self.lr_logalpha, noise_level=self.noise_level,
                          seed=self.random_state, recon=ReconConfig(max_iters=self.max_iters, tol=self.tol))
        res = train(images, cfg, J)
        self.pattern_ = res.pattern
        self.alpha_ = res.alpha
        self.history_ = res.history
        self.image_shape_ = images.shape[1:]
        self.reconstructor_ = SPIReconstructor(res.pattern, res.alpha, self.regulariser, self.filters, self.delta,
                                               noise_level=self.noise_level, random_state=self.random_state).fit(images)
        return self

    def transform(self, X):
        check_is_fitted(self, "pattern_")
        images = _images(X, self.image_shape)
        return simulate_images(self.pattern_, images, self.noise_level, self.random_state, EVAL_NOISE)

    def inverse_transform(self, Y):
        check_is_fitted(self, "pattern_")
        return self.reconstructor_.predict(Y)

    def score(self, X, y=None):
        check_is_fitted(self, "pattern_")
        return self.reconstructor_.score(X)
