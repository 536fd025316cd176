"""Pattern-family sweeps over M and their CSV tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .core import check_images
from .patterns import gaussian_matrix, scrambled_hadamard
from .regularizers import Regulariser, TotalVariation
from .solvers import PDHG, ReconConfig
from .trainer import RNP, STE, TrainConfig, default_alpha_grid, evaluate, select_alpha_grid, train

EVAL_FIELDS = ("pattern", "M", "regulariser", "seed", "alpha",
               "mean_psnr", "std_psnr", "mean_ssim", "std_ssim", "failed")

GAUSSIAN = "gaussian"
SH = "sh"
FAMILIES = (GAUSSIAN, SH, STE, RNP)


def regulariser_name(J: Regulariser) -> str:
    return {"TotalVariation": "tv", "HuberTV": "huber", "LearnedConv": "learned"}[type(J).__name__]


def recon_for(J: Regulariser, recon: ReconConfig) -> ReconConfig:
    return replace(recon, solver=PDHG) if isinstance(J, TotalVariation) else recon


def table_row(pattern, M, J, seed, alpha, table) -> dict:
    return dict(pattern=pattern, M=M, regulariser=regulariser_name(J), seed=seed, alpha=alpha,
                mean_psnr=table.mean_psnr, std_psnr=table.std_psnr,
                mean_ssim=table.mean_ssim, std_ssim=table.std_ssim, failed=int(table.failed.sum()))


def baseline_pattern(kind: str, M: int, N: int, seed: int):
    if kind == GAUSSIAN:
        return gaussian_matrix(M, N, seed)
    if kind == SH:
        return scrambled_hadamard(M, N, seed)
    raise ValueError(f"unknown baseline {kind!r}")


@dataclass(frozen=True)
class SweepConfig:
    Ms: tuple = (32, 64, 128, 256)
    families: tuple = (GAUSSIAN, SH, STE)
    seeds: tuple = (0,)
    noise_level: float = 0.05
    grid_points: int = 9
    grid_batch: int = 8
    train: TrainConfig = TrainConfig()
    eval_recon: ReconConfig = ReconConfig.evaluation()

    def __post_init__(self):
        bad = [f for f in self.families if f not in FAMILIES]
        if bad:
            raise ValueError(f"unknown pattern families {bad}")


def run_sweep(train_images, test_images, J: Regulariser, cfg: SweepConfig, J_eval: Regulariser | None = None,
              log=None) -> list[dict]:
    """Evaluate every (family, M, seed) cell.

    Baselines get a grid-selected alpha (mean SSIM on a training batch);
    learned patterns keep the alpha learned jointly with them. ``J`` is the
    smooth training prior; ``J_eval`` (default ``J``) is used to reconstruct.
    """
    train_images = check_images(train_images)
    test_images = check_images(test_images)
    J_eval = J_eval or J
    recon = recon_for(J_eval, cfg.eval_recon)
    N = train_images[0].size
    rows = []
    for M in cfg.Ms:
        for fam in cfg.families:
            for seed in cfg.seeds:
                if fam in (GAUSSIAN, SH):
                    A = baseline_pattern(fam, M, N, seed)
                    grid = default_alpha_grid(A, J_eval, cfg.grid_points)
                    alpha = select_alpha_grid(A, train_images[:cfg.grid_batch], grid, recon, J_eval,
                                              cfg.noise_level, seed)
                else:
                    tcfg = replace(cfg.train, method=fam, M=M, seed=seed, noise_level=cfg.noise_level)
                    res = train(train_images, tcfg, J)
                    A, alpha = res.pattern, res.alpha
                    if J_eval is not J:
                        grid = default_alpha_grid(A, J_eval, cfg.grid_points)
                        alpha = select_alpha_grid(A, train_images[:cfg.grid_batch], grid, recon, J_eval,
                                                  cfg.noise_level, seed)
                table = evaluate(A, alpha, test_images, recon, J_eval, cfg.noise_level, seed)
                row = table_row(fam, M, J_eval, seed, alpha, table)
                rows.append(row)
                if log is not None:
                    log(row)
    return rows


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows_csv(rows, path, fields=EVAL_FIELDS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in fields])


def mean_by(rows, *keys, value="mean_psnr") -> dict:
    """Average ``value`` over rows grouped by ``keys``."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r[value])
    return {k: float(np.mean(v)) for k, v in groups.items()}
