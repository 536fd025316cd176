"""Learning binary illumination patterns for single-pixel imaging."""

from .core import MeasurementSet, QualityReport, SensingMatrix, psnr, quality, simulate_measurements, ssim
from .patterns import (
    EpsilonSchedule, LatentPattern, binarisation_backward, binary_penalty, finalise_rnp, gaussian_matrix,
    init_latent, materialise, scrambled_hadamard,
)
from .regularizers import FilterBank, HuberTV, LearnedConv, PretrainConfig, TotalVariation, pretrain_filters
from .solvers import ReconConfig, ReconResult, solve_smooth_nmapg, solve_tv_pdhg, step_operator_T
from .gradients import UpperGradient, fd_oracle_gradient, jfb_gradient, upper_loss
from .trainer import TrainConfig, TrainResult, evaluate, select_alpha_grid, train
from .estimators import PatternLearner, SPIReconstructor

__all__ = [
    "MeasurementSet", "QualityReport", "SensingMatrix", "psnr", "quality", "simulate_measurements", "ssim",
    "EpsilonSchedule", "LatentPattern", "binarisation_backward", "binary_penalty", "finalise_rnp", "gaussian_matrix",
    "init_latent", "materialise", "scrambled_hadamard",
    "FilterBank", "HuberTV", "LearnedConv", "PretrainConfig", "TotalVariation", "pretrain_filters",
    "ReconConfig", "ReconResult", "solve_smooth_nmapg", "solve_tv_pdhg", "step_operator_T",
    "UpperGradient", "fd_oracle_gradient", "jfb_gradient", "upper_loss",
    "TrainConfig", "TrainResult", "evaluate", "select_alpha_grid", "train",
    "PatternLearner", "SPIReconstructor",
]

__version__ = "0.1.0"
