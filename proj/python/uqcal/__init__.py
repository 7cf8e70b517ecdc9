"""Calibration metrics, calibrators and tooling for probabilistic 3D detections."""

__path__ = __import__("pkgutil").extend_path(__path__, __name__)

import json

from uqcal._core import (
    ClassificationCalibrator,
    ConfigError,
    NumericError,
    ParseError,
    ValidationError,
    classification_from_json,
    d_ece,
    differential_evolution,
    fit_classification,
    gain,
    ks_chi2_statistic,
    la_ace,
    la_ece,
    log_bessel_i0,
    loss_center,
    loss_size,
    loss_yaw,
    mca,
    mca_angular,
    pava,
    run_cli,
)
from uqcal._core import evaluate as _evaluate


def evaluate(prefix, thresholds=None, pool_xyz=False, workers=1):
    """Class-wise threshold-sweep report of a dataset as a dict."""
    return json.loads(_evaluate(str(prefix), thresholds, pool_xyz, workers))


__all__ = [
    "ClassificationCalibrator",
    "ConfigError",
    "NumericError",
    "ParseError",
    "ValidationError",
    "classification_from_json",
    "d_ece",
    "differential_evolution",
    "evaluate",
    "fit_classification",
    "gain",
    "ks_chi2_statistic",
    "la_ace",
    "la_ece",
    "log_bessel_i0",
    "loss_center",
    "loss_size",
    "loss_yaw",
    "mca",
    "mca_angular",
    "pava",
    "run_cli",
]
