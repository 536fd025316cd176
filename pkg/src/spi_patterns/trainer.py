"""Bilevel pattern learning, baseline alpha selection and evaluation."""

from __future__ import annotations

import csv
import hashlib
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import SensingMatrix, as_matrix, check_images, make_rng, noise_sigma, psnr, ssim
from .gradients import jfb_gradients, upper_loss
from .patterns import (
    PROJECTED_BOX, SIGN_STE, TANH, EpsilonSchedule, LatentPattern, binarisation_backward,
    binary_penalty, finalise_rnp, init_latent, materialise,
)
from .regularizers import HuberTV, LearnedConv, Regulariser, TotalVariation
from .solvers import (
    ReconConfig, SolverError, lipschitz_estimate, nmapg_batch, reconstruct_batch, spectral_norm_sq,
)

STE = "ste"
RNP = "rnp"
ADAM = "adam"
SGD = "sgd"

CHECKPOINT_VERSION = 1
CHUNK = 8  # rows per solver call; fixed so results never depend on the worker count

# stream keys for make_rng
_SHUFFLE, _TRAIN_NOISE, EVAL_NOISE, _GRID_NOISE, _LATENT = 10, 11, 12, 13, 14


class TrainingError(RuntimeError):
    pass


def worker_count() -> int:
    env = os.environ.get("SPI_THREADS")
    if env:
        n = int(env)
        if n < 1:
            raise ValueError("SPI_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def solve_rows(A, Y, alpha, J, recon: ReconConfig, shape, X0=None, *, details=False):
    """Solve every row of ``Y`` in fixed-size chunks, optionally on a thread pool.

    With ``details`` the per-row convergence flags are returned as well.
    """
    a = as_matrix(A)
    Y = np.atleast_2d(Y)
    chunks = [slice(i, min(i + CHUNK, len(Y))) for i in range(0, len(Y), CHUNK)]

    def run(sl):
        x0 = None if X0 is None else X0[sl]
        if isinstance(J, TotalVariation):
            X = reconstruct_batch(a, Y[sl], alpha, J, recon, shape, x0)
            return X, np.ones(len(X), bool)
        out = nmapg_batch(a, Y[sl], alpha, J, recon, shape, x0)
        return out[0], out[3]

    workers = min(worker_count(), len(chunks))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(sl) for sl in chunks]
    X = np.concatenate([p[0] for p in parts])
    conv = np.concatenate([p[1] for p in parts])
    return (X, conv) if details else X


def simulate_batch(A, X, noise_level, rngs):
    """Row-wise ``y = A x + n`` with relative-RMS noise; returns ``(Y, noise)``."""
    a = as_matrix(A)
    clean = X @ a.T
    noise = np.zeros_like(clean)
    if noise_level > 0:
        for i, rng in enumerate(rngs):
            noise[i] = rng.standard_normal(a.shape[0]) * noise_sigma(clean[i], noise_level)
    return clean + noise, noise


# ---------------------------------------------------------------------------
# configuration and state


@dataclass(frozen=True)
class TrainConfig:
    method: str = STE
    M: int = 64
    epochs: int = 30
    batch_size: int = 8
    lr_Z: float = 1e-2
    lr_logalpha: float = 1e-2
    optimizer: str = ADAM
    noise_level: float = 0.05
    seed: int = 0
    recon: ReconConfig = field(default_factory=ReconConfig.training)
    eps_schedule: EpsilonSchedule | None = None  # None: default schedule over the run
    parameterisation: str | None = None  # None: sign for STE, tanh for RnP
    penalty_weight: float = 1.0
    init_scale: float = 0.1
    beta: float = 1.0
    learn_alpha: bool = True
    alpha0: float | None = None  # None: coarse grid on the first batch
    alpha_grid_points: int = 5
    resample_noise: bool = True
    warm_start_solves: bool = True

    def __post_init__(self):
        if self.method not in (STE, RNP):
            raise ValueError(f"unknown method {self.method!r}")
        if self.optimizer not in (ADAM, SGD):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.M < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("M and batch_size must be >= 1, epochs >= 0")
        if not (self.lr_Z > 0 and self.lr_logalpha > 0):
            raise ValueError("learning rates must be positive")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if self.alpha0 is not None and not self.alpha0 > 0:
            raise ValueError("alpha0 must be positive")
        p = self.latent_parameterisation
        if self.method == STE and p != SIGN_STE:
            raise ValueError("STE training uses the sign parameterisation")
        if self.method == RNP and p not in (TANH, PROJECTED_BOX):
            raise ValueError("RnP training uses the tanh or projected-box parameterisation")

    @property
    def latent_parameterisation(self) -> str:
        if self.parameterisation is not None:
            return self.parameterisation
        return SIGN_STE if self.method == STE else TANH

    def schedule(self, total_steps: int) -> EpsilonSchedule:
        return self.eps_schedule or EpsilonSchedule.default(max(total_steps, 1))


def config_hash(cfg: TrainConfig, J: Regulariser, corpus_shape) -> str:
    h = hashlib.sha256(repr(sorted(asdict(cfg).items())).encode())
    h.update(repr(J).encode())
    if isinstance(J, LearnedConv):
        h.update(J.filters.kernels.tobytes())
    h.update(repr(tuple(corpus_shape)).encode())
    return h.hexdigest()


class Adam:
    """Adaptive-moment update with bias correction; plain SGD when ``sgd=True``."""

    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8, sgd=False):
        self.lr, self.beta1, self.beta2, self.eps, self.sgd = lr, beta1, beta2, eps, sgd
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, param, grad):
        if self.sgd:
            return param - self.lr * grad
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mh = self.m / (1 - self.beta1 ** self.t)
        vh = self.v / (1 - self.beta2 ** self.t)
        return param - self.lr * mh / (np.sqrt(vh) + self.eps)


HISTORY_FIELDS = ("epoch", "loss", "penalty", "mean_psnr", "alpha", "epsilon")


@dataclass
class TrainState:
    latent: LatentPattern
    log_alpha: float
    opt_Z: Adam
    opt_alpha: Adam
    step: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)
    cache: np.ndarray | None = None  # last reconstruction of each training image

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)


@dataclass
class TrainResult:
    pattern: SensingMatrix
    alpha: float
    history: list
    state: TrainState
    rnp_diagnostic: float | None = None


def save_checkpoint(path, state: TrainState, cfg_hash: str) -> None:
    oz, oa = state.opt_Z, state.opt_alpha
    hist = np.array([[row[k] for k in HISTORY_FIELDS] for row in state.history], dtype=np.float64)
    hist = hist.reshape(-1, len(HISTORY_FIELDS))
    arrays = dict(
        version=np.array(CHECKPOINT_VERSION), config_hash=np.array(cfg_hash),
        Z=state.latent.Z, A=materialise(state.latent).entries,
        parameterisation=np.array(state.latent.parameterisation), beta=np.array(state.latent.beta),
        log_alpha=np.array(state.log_alpha), step=np.array(state.step), epoch=np.array(state.epoch),
        mZ=oz.m, vZ=oz.v, tZ=np.array(oz.t), ma=oa.m, va=oa.v, ta=np.array(oa.t), history=hist,
    )
    if state.cache is not None:
        arrays["cache"] = state.cache
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path, cfg: TrainConfig, cfg_hash: str | None = None) -> TrainState:
    with np.load(path, allow_pickle=False) as f:
        if int(f["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {int(f['version'])}")
        if cfg_hash is not None and str(f["config_hash"]) != cfg_hash:
            raise ValueError("checkpoint was written with a different configuration")
        latent = LatentPattern(f["Z"], str(f["parameterisation"]), float(f["beta"]))
        opt_Z = Adam(latent.Z.shape, cfg.lr_Z, sgd=cfg.optimizer == SGD)
        opt_a = Adam((), cfg.lr_logalpha, sgd=cfg.optimizer == SGD)
        opt_Z.m, opt_Z.v, opt_Z.t = f["mZ"].copy(), f["vZ"].copy(), int(f["tZ"])
        opt_a.m, opt_a.v, opt_a.t = f["ma"].copy(), f["va"].copy(), int(f["ta"])
        history = [dict(zip(HISTORY_FIELDS, row)) for row in f["history"].tolist()]
        for row in history:
            row["epoch"] = int(row["epoch"])
        cache = f["cache"].copy() if "cache" in f.files else None
        return TrainState(latent, float(f["log_alpha"]), opt_Z, opt_a, int(f["step"]), int(f["epoch"]), history, cache)


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])


# ---------------------------------------------------------------------------
# training


def default_alpha_grid(A, J: Regulariser, points: int = 9, lo: float = -4.0, hi: float = 0.0) -> np.ndarray:
    """Log-spaced grid scaled so that ``alpha * L_J`` spans ``[10^lo, 10^hi] * ||A||^2``.

    TV has no gradient Lipschitz constant; its scale is ``||grad||^2 <= 8``.
    """
    LJ = J.lipschitz() if J.smooth else 8.0
    return spectral_norm_sq(A) / LJ * np.logspace(lo, hi, points)


def _initial_state(cfg: TrainConfig, N: int, warm_start) -> TrainState:
    latent = init_latent(cfg.M, N, make_rng(cfg.seed, _LATENT).integers(2**63), cfg.latent_parameterisation,
                         cfg.init_scale, warm_start, cfg.beta)
    sgd = cfg.optimizer == SGD
    return TrainState(latent, 0.0, Adam(latent.Z.shape, cfg.lr_Z, sgd=sgd), Adam((), cfg.lr_logalpha, sgd=sgd))


def train(corpus, cfg: TrainConfig, J: Regulariser | None = None, *, warm_start=None,
          checkpoint_path=None, resume_from=None, callback=None) -> TrainResult:
    """Learn a binary sensing matrix and regularisation weight on ``corpus``.

    ``checkpoint_path`` is rewritten after every epoch; ``resume_from``
    continues a run from such a file and reproduces the uninterrupted
    trajectory exactly.
    """
    images = check_images(corpus)
    n, H, W = images.shape
    N = H * W
    shape = (H, W)
    if cfg.M > N:
        raise ValueError(f"M={cfg.M} exceeds N={N}")
    if cfg.batch_size > n:
        raise ValueError(f"batch_size={cfg.batch_size} exceeds corpus size {n}")
    J = J if J is not None else HuberTV()
    if not J.smooth:
        raise ValueError("training needs a smooth regulariser")
    X = images.reshape(n, N)
    batches = math.ceil(n / cfg.batch_size)
    schedule = cfg.schedule(cfg.epochs * batches)
    chash = config_hash(cfg, J, images.shape)

    if resume_from is not None:
        state = load_checkpoint(resume_from, cfg, chash)
    else:
        state = _initial_state(cfg, N, warm_start)
        if cfg.alpha0 is not None:
            state.log_alpha = math.log(cfg.alpha0)
        elif cfg.epochs > 0:
            first = make_rng(cfg.seed, _SHUFFLE, 0).permutation(n)[:cfg.batch_size]
            grid = default_alpha_grid(materialise(state.latent), J, cfg.alpha_grid_points)
            state.log_alpha = math.log(select_alpha_grid(materialise(state.latent), images[first], grid,
                                                         cfg.recon, J, cfg.noise_level, cfg.seed))
    if cfg.warm_start_solves and state.cache is None:
        state.cache = np.zeros((n, N))

    while state.epoch < cfg.epochs:
        epoch = state.epoch
        order = make_rng(cfg.seed, _SHUFFLE, epoch).permutation(n)
        losses, penalties, psnrs = [], [], []
        eps = schedule(state.step)
        for b in range(batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            eps = schedule(state.step)
            loss, pen, ps = _train_step(state, X[idx], idx, cfg, J, shape, eps, epoch)
            losses.append(loss)
            penalties.append(pen)
            psnrs.append(ps)
        state.epoch += 1
        row = dict(epoch=epoch, loss=float(np.mean(losses)), penalty=float(np.mean(penalties)),
                   mean_psnr=float(np.mean(psnrs)), alpha=state.alpha, epsilon=float(eps) if cfg.method == RNP else 0.0)
        state.history.append(row)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, state, chash)
        if callback is not None:
            callback(state, row)

    A = materialise(state.latent)
    diag = None
    if cfg.method == RNP:
        A, diag = finalise_rnp(A)
    if not A.is_binary:
        raise TrainingError("final pattern is not binary")
    return TrainResult(A, state.alpha, list(state.history), state, diag)


def _train_step(state: TrainState, Xb, idx, cfg: TrainConfig, J, shape, eps, epoch):
    A = materialise(state.latent)
    a = A.entries
    if cfg.method == STE and not A.is_binary:
        raise TrainingError("STE pattern left the binary set")
    alpha = state.alpha
    noise_epoch = epoch if cfg.resample_noise else 0
    rngs = [make_rng(cfg.seed, _TRAIN_NOISE, noise_epoch, int(i)) for i in idx]
    Y, _ = simulate_batch(a, Xb, cfg.noise_level, rngs)
    X0 = state.cache[idx] if state.cache is not None else None
    try:
        Xhat, conv = solve_rows(a, Y, alpha, J, cfg.recon, shape, X0, details=True)
    except SolverError as exc:
        raise TrainingError(f"lower-level solve failed at step {state.step}: {exc}") from exc
    finite = np.all(np.isfinite(Xhat), axis=1)
    if np.mean(~finite) > 0.5:
        raise TrainingError(f"lower-level divergence on {np.sum(~finite)}/{len(finite)} samples at step {state.step}")
    Xhat, Xt = Xhat[finite], Xb[finite]
    B = len(Xhat)
    per = [upper_loss(Xt[i], Xhat[i]) for i in range(B)]
    loss = float(np.mean([p[0] for p in per]))
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite training loss at step {state.step}")
    upstream = np.stack([p[1] for p in per]) / B
    tau = 0.9 / lipschitz_estimate(a, alpha, J)
    gA, galpha = jfb_gradients(Xhat, a, Y[finite], Xt, alpha, J, upstream, tau, shape)
    gZ = binarisation_backward(state.latent, gA)
    pen = 0.0
    if cfg.method == RNP:
        pen, pgrad = binary_penalty(a, eps)
        gZ = gZ + cfg.penalty_weight * binarisation_backward(state.latent, pgrad)
    state.latent.Z = state.opt_Z.step(state.latent.Z, gZ)
    if cfg.learn_alpha:
        state.log_alpha = float(state.opt_alpha.step(np.float64(state.log_alpha), alpha * galpha))
    if state.cache is not None:
        state.cache[idx[finite]] = Xhat
    state.step += 1
    ps = float(np.mean([psnr(Xt[i], np.clip(Xhat[i], 0, 1)) for i in range(B)]))
    return loss, pen, ps


# ---------------------------------------------------------------------------
# alpha selection and evaluation


def simulate_images(A, images, noise_level, seed, stream):
    a = as_matrix(A)
    X = images.reshape(len(images), -1)
    rngs = [make_rng(seed, stream, i) for i in range(len(images))]
    return simulate_batch(a, X, noise_level, rngs)[0]


def select_alpha_grid(A, images, grid, recon: ReconConfig, J: Regulariser | None = None,
                      noise_level: float = 0.05, seed: int = 0, *, scores: list | None = None) -> float:
    """Grid value maximising mean SSIM of the reconstructions; ties go to the smaller alpha."""
    grid = np.asarray(grid, dtype=np.float64).ravel()
    if grid.size == 0 or np.any(~(grid > 0)):
        raise ValueError("alpha grid must be non-empty and positive")
    images = check_images(images)
    J = J if J is not None else HuberTV()
    shape = images.shape[1:]
    Y = simulate_images(A, images, noise_level, seed, _GRID_NOISE)
    best, best_score = None, -np.inf
    for alpha in np.sort(grid):
        try:
            Xhat = solve_rows(A, Y, float(alpha), J, recon, shape)
        except (SolverError, FloatingPointError, ValueError):
            continue
        if not np.all(np.isfinite(Xhat)):
            continue
        score = float(np.mean([ssim(images[i], np.clip(Xhat[i].reshape(shape), 0, 1)) for i in range(len(images))]))
        if scores is not None:
            scores.append((float(alpha), score))
        if score > best_score:
            best, best_score = float(alpha), score
    if best is None:
        raise TrainingError("every reconstruction in the alpha grid failed")
    return best


@dataclass
class EvalTable:
    psnr: np.ndarray
    ssim: np.ndarray
    failed: np.ndarray

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr[~self.failed]))

    @property
    def std_psnr(self) -> float:
        return float(np.std(self.psnr[~self.failed]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim[~self.failed]))

    @property
    def std_ssim(self) -> float:
        return float(np.std(self.ssim[~self.failed]))


def evaluate(A, alpha: float, test_images, recon: ReconConfig | None = None, J: Regulariser | None = None,
             noise_level: float = 0.05, seed: int = 0) -> EvalTable:
    """Simulate, reconstruct, clamp to [0, 1] and score every test image."""
    images = check_images(test_images)
    recon = recon or ReconConfig.evaluation()
    J = J if J is not None else HuberTV()
    shape = images.shape[1:]
    Y = simulate_images(A, images, noise_level, seed, EVAL_NOISE)
    n = len(images)
    P, S, failed = np.full(n, np.nan), np.full(n, np.nan), np.zeros(n, bool)
    try:
        Xhat = solve_rows(A, Y, alpha, J, recon, shape)
    except SolverError:
        Xhat = np.full((n, shape[0] * shape[1]), np.nan)
    for i in range(n):
        if not np.all(np.isfinite(Xhat[i])):
            failed[i] = True
            continue
        x = np.clip(Xhat[i].reshape(shape), 0, 1)
        P[i], S[i] = psnr(images[i], x), ssim(images[i], x)
    return EvalTable(P, S, failed)
