"""ID-calibrated ensembles of a standard and a robust classifier.

Submodules: :mod:`core` (scores, softmax, errors), :mod:`calibration`
(confidence-matching temperature, ECE), :mod:`ensemble` (combination
strategies), :mod:`synthetic` and :mod:`oracle` (verification lab),
:mod:`evaluation` (accuracy tables), :mod:`cli`.
"""
from .calibration import TemperatureScale, average_confidence, ece, fit_temperature
from .core import (
    ClassMarginals,
    EmptyInputError,
    LabeledScores,
    ScoreSet,
    ShapeError,
    ValidationError,
    accuracy,
    error_rate,
    predict,
    softmax_rows,
)
from .ensemble import (
    EnsembleConfig,
    Strategy,
    build_calibrated_ensemble,
    combine,
    fit_ensemble,
    mscale_demo,
    tune_weight,
)
from .evaluation import EvalRow, aggregate, evaluate_models, gap_closed
from .kernels import current_backend

__version__ = "0.1.0"
