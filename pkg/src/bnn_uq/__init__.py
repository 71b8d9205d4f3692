"""Bayesian neural network inference methods and uncertainty benchmarks on synthetic data."""

from bnn_uq.nn import (
    BernoulliClassification, GaussianRegression, LogJoint, MlpSpec, forward, grad_log_joint,
    log_joint,
)
from bnn_uq.samplers import (
    HmcConfig, PosteriorSamples, SghmcConfig, SgldConfig, hmc_run, sghmc_run, sgld_run,
)

__version__ = "0.1.0"

__all__ = [
    "BernoulliClassification", "GaussianRegression", "LogJoint", "MlpSpec", "forward",
    "grad_log_joint", "log_joint", "HmcConfig", "PosteriorSamples", "SghmcConfig",
    "SgldConfig", "hmc_run", "sghmc_run", "sgld_run",
]
