"""Combining a standard and a robust model's scores.

Seven strategies are supported. The headline one, ``CALIBRATED_PROBS``, fits a
confidence-matching temperature for each model on ID validation data and
returns ``log(softmax(std / t_std) + softmax(rob / t_rob))``.
"""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .calibration import DEFAULT_TOL, IDENTITY, TemperatureScale, fit_temperature
from .core import (
    ClassMarginals,
    LabeledScores,
    ScoreSet,
    ShapeError,
    ValidationError,
    as_scores,
    log_softmax_rows,
    predict,
)

WEIGHT_GRID = tuple(i / 10 for i in range(11))


class Strategy(str, enum.Enum):
    LOGITS = "logits"
    PROBS = "probs"
    TUNED_LOGITS = "tuned-logits"
    TUNED_PROBS = "tuned-probs"
    CALIBRATED_LOGITS = "calibrated-logits"
    CALIBRATED_PROBS = "calibrated-probs"
    CALIBRATED_LOGITS_MARGINAL = "calibrated-logits-marginal"

    @property
    def is_tuned(self) -> bool:
        return self in (Strategy.TUNED_LOGITS, Strategy.TUNED_PROBS)

    @property
    def is_calibrated(self) -> bool:
        return self in (
            Strategy.CALIBRATED_LOGITS,
            Strategy.CALIBRATED_PROBS,
            Strategy.CALIBRATED_LOGITS_MARGINAL,
        )

    @classmethod
    def parse(cls, name) -> "Strategy":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("_", "-")
        for member in cls:
            if member.value == key or member.name.lower().replace("_", "-") == key:
                return member
        raise ValidationError(
            f"unknown strategy {name!r}; expected one of {[m.value for m in cls]}"
        )


def _on_grid(alpha: float) -> bool:
    return any(alpha == g for g in WEIGHT_GRID)


@dataclass(frozen=True)
class EnsembleConfig:
    """Everything needed to apply a fitted ensemble to new score pairs."""

    strategy: Strategy = Strategy.CALIBRATED_PROBS
    t_std: TemperatureScale = IDENTITY
    t_rob: TemperatureScale = IDENTITY
    alpha: float = 0.5
    marginals: Optional[ClassMarginals] = None
    few_validation_rows: bool = field(default=False, compare=False)

    def __post_init__(self):
        strategy = Strategy.parse(self.strategy)
        object.__setattr__(self, "strategy", strategy)
        alpha = float(self.alpha)
        if not 0.0 <= alpha <= 1.0:
            raise ValidationError(f"alpha={alpha!r} outside [0, 1]")
        if strategy.is_tuned and not _on_grid(alpha):
            raise ValidationError(f"tuned alpha={alpha!r} is not on the 0.1 grid")
        object.__setattr__(self, "alpha", alpha)
        if not strategy.is_calibrated and (self.t_std.t != 1.0 or self.t_rob.t != 1.0):
            raise ValidationError(f"{strategy.value} does not use temperatures")

    def to_dict(self):
        return {
            "strategy": self.strategy.value,
            "t_std": self.t_std.to_dict(),
            "t_rob": self.t_rob.to_dict(),
            "alpha": self.alpha,
            "marginals": None if self.marginals is None else self.marginals.probs.tolist(),
            "few_validation_rows": self.few_validation_rows,
        }


def _log_mix(log_p, log_q, alpha):
    """``log(alpha * p + (1 - alpha) * q)`` computed in log space."""
    if alpha == 1.0:
        return log_p
    if alpha == 0.0:
        return log_q
    return np.logaddexp(math.log(alpha) + log_p, math.log1p(-alpha) + log_q)


def combine(std, rob, cfg: EnsembleConfig) -> ScoreSet:
    """Ensemble scores for aligned standard and robust score sets.

    Probability-space strategies return ``log`` of the summed (or weighted)
    probabilities; they are evaluated via ``logaddexp`` so the result stays
    finite even when a softmax entry underflows.
    """
    std, rob = as_scores(std), as_scores(rob)
    if std.scores.shape != rob.scores.shape:
        raise ShapeError(f"standard {std.scores.shape} vs robust {rob.scores.shape}")
    a, b = std.scores, rob.scores
    st = cfg.strategy
    if st is Strategy.LOGITS:
        out = a + b
    elif st is Strategy.PROBS:
        out = np.logaddexp(log_softmax_rows(a), log_softmax_rows(b))
    elif st is Strategy.TUNED_LOGITS:
        if cfg.alpha == 1.0:
            out = a
        elif cfg.alpha == 0.0:
            out = b
        else:
            out = cfg.alpha * a + (1.0 - cfg.alpha) * b
    elif st is Strategy.TUNED_PROBS:
        out = _log_mix(log_softmax_rows(a), log_softmax_rows(b), cfg.alpha)
    elif st is Strategy.CALIBRATED_LOGITS:
        out = a / cfg.t_std.t + b / cfg.t_rob.t
    elif st is Strategy.CALIBRATED_PROBS:
        out = np.logaddexp(log_softmax_rows(a / cfg.t_std.t), log_softmax_rows(b / cfg.t_rob.t))
    elif st is Strategy.CALIBRATED_LOGITS_MARGINAL:
        m = cfg.marginals if cfg.marginals is not None else ClassMarginals.uniform(std.class_count)
        if m.class_count != std.class_count:
            raise ShapeError("marginals and scores disagree on the class count")
        out = a / cfg.t_std.t + b / cfg.t_rob.t - m.log_probs
    else:  # pragma: no cover
        raise ValidationError(f"unhandled strategy {st}")
    return ScoreSet(out)


def _check_aligned(std_val: LabeledScores, rob_val: LabeledScores):
    if std_val.scores.scores.shape != rob_val.scores.scores.shape:
        raise ShapeError("standard and robust validation sets have different shapes")
    if not np.array_equal(std_val.labels, rob_val.labels):
        raise ValidationError("standard and robust validation labels differ")


def weight_grid_accuracies(std_val: LabeledScores, rob_val: LabeledScores, probs_space: bool):
    """Validation accuracy of the tuned ensemble at every grid weight, in grid order."""
    _check_aligned(std_val, rob_val)
    strategy = Strategy.TUNED_PROBS if probs_space else Strategy.TUNED_LOGITS
    accs = []
    for alpha in WEIGHT_GRID:
        cfg = EnsembleConfig(strategy, alpha=alpha)
        pred = predict(combine(std_val.scores, rob_val.scores, cfg))
        accs.append(int(np.count_nonzero(pred == std_val.labels)) / std_val.row_count)
    return accs


def tune_weight(std_val: LabeledScores, rob_val: LabeledScores, probs_space: bool = False) -> float:
    """First grid weight (ascending) with the best ID validation accuracy."""
    accs = weight_grid_accuracies(std_val, rob_val, probs_space)
    return WEIGHT_GRID[int(np.argmax(accs))]


def build_calibrated_ensemble(std_val: LabeledScores, rob_val: LabeledScores,
                              strategy=Strategy.CALIBRATED_PROBS,
                              tol: float = DEFAULT_TOL) -> EnsembleConfig:
    strategy = Strategy.parse(strategy)
    if not strategy.is_calibrated:
        raise ValidationError(f"{strategy.value} is not a calibrated strategy")
    _check_aligned(std_val, rob_val)
    few = std_val.row_count < std_val.class_count
    if few:
        warnings.warn(
            f"calibrating on {std_val.row_count} rows for {std_val.class_count} classes",
            RuntimeWarning,
            stacklevel=2,
        )
    t_std = fit_temperature(std_val, tol=tol)
    t_rob = fit_temperature(rob_val, tol=tol)
    marginals = None
    if strategy is Strategy.CALIBRATED_LOGITS_MARGINAL:
        marginals = ClassMarginals.from_labels(std_val.labels, std_val.class_count)
    return EnsembleConfig(strategy, t_std=t_std, t_rob=t_rob, marginals=marginals,
                          few_validation_rows=few)


def fit_ensemble(std_val: LabeledScores, rob_val: LabeledScores, strategy,
                 tol: float = DEFAULT_TOL) -> EnsembleConfig:
    """Fit any strategy on ID validation data (tuning, calibration, or nothing)."""
    strategy = Strategy.parse(strategy)
    if strategy.is_calibrated:
        return build_calibrated_ensemble(std_val, rob_val, strategy, tol=tol)
    _check_aligned(std_val, rob_val)
    if strategy.is_tuned:
        alpha = tune_weight(std_val, rob_val, probs_space=strategy is Strategy.TUNED_PROBS)
        return EnsembleConfig(strategy, alpha=alpha)
    return EnsembleConfig(strategy)


@dataclass(frozen=True)
class MScaleReport:
    m_factor: float
    agreement: float
    threshold: float
    rows: int

    def to_dict(self):
        return {
            "m_factor": self.m_factor,
            "agreement_with_standard": self.agreement,
            "threshold": self.threshold,
            "rows": self.rows,
        }


def dominance_threshold(std, rob) -> float:
    """Smallest factor beyond which ``M * std + rob`` always predicts like ``std``.

    Per row with standard prediction ``j``: ``max_k (rob_k - rob_j) / (std_j - std_k)``
    over ``k != j``. Infinite when some row has a tied standard maximum that the
    robust scores break toward a higher index.
    """
    a, b = as_scores(std).scores, as_scores(rob).scores
    if a.shape[0] == 0:
        return 0.0
    j = np.argmax(a, axis=1)
    rows = np.arange(a.shape[0])
    gap_std = a[rows, j][:, None] - a
    gap_rob = b - b[rows, j][:, None]
    other = np.ones_like(a, dtype=bool)
    other[rows, j] = False
    worst = 0.0
    tied = other & (gap_std == 0)
    # a tie on std is kept by argmax only if rob does not favour the other index
    if np.any(tied & (gap_rob > 0)):
        return math.inf
    strict = other & (gap_std > 0)
    if np.any(strict):
        ratios = np.where(strict, gap_rob / np.where(strict, gap_std, 1.0), -np.inf)
        worst = max(worst, float(ratios.max()))
    return worst


def mscale_demo(calibrated_std, calibrated_rob, m_factor: float) -> MScaleReport:
    """How often the uncalibrated logit sum of ``(m_factor * std, rob)`` just copies ``std``."""
    if m_factor < 1:
        raise ValidationError("m_factor must be >= 1")
    std, rob = as_scores(calibrated_std), as_scores(calibrated_rob)
    ens = combine(std.scaled(m_factor), rob, EnsembleConfig(Strategy.LOGITS))
    same = predict(ens) == predict(std)
    agreement = float(np.count_nonzero(same)) / max(std.row_count, 1)
    return MScaleReport(float(m_factor), agreement, dominance_threshold(std, rob), std.row_count)
