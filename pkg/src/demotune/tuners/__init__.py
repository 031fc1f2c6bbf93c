"""Parameter tuners: gradient descent, unscented Kalman filter, maximum likelihood."""

from demotune.tuners.common import (
    ClosedLoopCost,
    ParamSpace,
    TuneConfig,
    TuneTrace,
    UkfConfig,
    numerical_gradient,
)
from demotune.tuners.descent import descend, residual_covariance, tune_gd, tune_ml
from demotune.tuners.ukf import MerweSigmaPoints, UnscentedKalmanFilter, tune_ukf

TUNERS = {"gd": tune_gd, "ukf": tune_ukf, "ml": tune_ml}


def tune(demo, p0, cfg, planner_cfg=None, weights=None):
    """Dispatch to the tuner named by ``cfg.method``."""
    return TUNERS[cfg.method](demo, p0, cfg, planner_cfg, weights)


__all__ = [
    "ClosedLoopCost",
    "MerweSigmaPoints",
    "ParamSpace",
    "TUNERS",
    "TuneConfig",
    "TuneTrace",
    "UkfConfig",
    "UnscentedKalmanFilter",
    "descend",
    "numerical_gradient",
    "residual_covariance",
    "tune",
    "tune_gd",
    "tune_ml",
    "tune_ukf",
]
