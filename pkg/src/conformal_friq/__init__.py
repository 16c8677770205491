"""Conformal one-sided bounds on full-reference image-quality metrics."""

from .conformal import BoundModel, CalibrationInfeasible, calibrate, calibrate_lambda
from .dataset import FriqDataset, generate_dataset, read_dataset, write_dataset
from .metrics import Orientation, get_metric, psnr, ssim
from .predictors import build_predictor
from .sandbox import Fidelity, SandboxProblem, make_problem

__version__ = "0.1.0"

__all__ = [
    "BoundModel",
    "CalibrationInfeasible",
    "Fidelity",
    "FriqDataset",
    "Orientation",
    "SandboxProblem",
    "build_predictor",
    "calibrate",
    "calibrate_lambda",
    "generate_dataset",
    "get_metric",
    "make_problem",
    "psnr",
    "read_dataset",
    "ssim",
    "write_dataset",
]
