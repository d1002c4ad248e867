"""Generative Bayesian prediction through quantile functions: quantile
regression networks with conformal calibration, closed-form normal-normal
distortion updates, and kernel regression baselines."""

from . import analytic, conformal, experiments, kernel, numerics, qnn

__all__ = ["analytic", "conformal", "experiments", "kernel", "numerics", "qnn"]
__version__ = "0.1.0"
