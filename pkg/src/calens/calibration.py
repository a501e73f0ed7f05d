"""Confidence-matching temperature scaling and calibration diagnostics.

The temperature is chosen so that the mean max-softmax confidence on ID
validation data equals the model's accuracy there. Confidence decreases
monotonically in the temperature, so plain bisection finds it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import (
    EmptyInputError,
    LabeledScores,
    ValidationError,
    accuracy,
    as_scores,
    predict,
    softmax_rows,
)

T_MIN = 1e-3
T_MAX = 1e3
DEFAULT_TOL = 1e-6
MAX_STEPS = 200


@dataclass(frozen=True)
class TemperatureScale:
    """Positive divisor applied to scores; ``clamped`` marks a fit that hit a bracket bound."""

    t: float = 1.0
    clamped: bool = False

    def __post_init__(self):
        t = float(self.t)
        if not (T_MIN <= t <= T_MAX) or not math.isfinite(t):
            raise ValidationError(f"temperature {t!r} outside [{T_MIN}, {T_MAX}]")
        object.__setattr__(self, "t", t)

    def apply(self, s):
        return as_scores(s).scaled(1.0 / self.t)

    def to_dict(self):
        return {"temperature": self.t, "clamped": self.clamped}


IDENTITY = TemperatureScale(1.0)


def _t_value(t) -> float:
    if isinstance(t, TemperatureScale):
        return t.t
    t = float(t)
    if not t > 0:
        raise ValidationError("temperature must be positive")
    return t


def average_confidence(s, t=IDENTITY) -> float:
    """Mean over rows of the max softmax probability of ``scores / t``."""
    s = as_scores(s)
    if s.row_count == 0:
        raise EmptyInputError("average confidence of an empty score set")
    return kernels.mean_max_softmax(s.scores, 1.0 / _t_value(t))


def fit_temperature(d: LabeledScores, tol: float = DEFAULT_TOL, target: float | None = None,
                    max_steps: int = MAX_STEPS) -> TemperatureScale:
    """Bisection for ``t`` with ``average_confidence(d.scores, t) == target``.

    ``target`` defaults to the accuracy of ``d``. Bisection runs in log-t
    space over ``[T_MIN, T_MAX]`` until the bracket stops shrinking, so the
    confidence gap ends up far below ``tol``; ``tol`` is the acceptance
    threshold for the final gap. Targets outside the reachable confidence
    range return the nearest bound with ``clamped=True``.
    """
    if not tol > 0:
        raise ValidationError("tol must be positive")
    if d.row_count == 0:
        raise EmptyInputError("cannot fit a temperature on an empty dataset")
    scores = d.scores.scores
    if target is None:
        target = accuracy(d)

    def conf(t):
        return kernels.mean_max_softmax(scores, 1.0 / t)

    if target >= conf(T_MIN):
        return TemperatureScale(T_MIN, clamped=True)
    if target <= conf(T_MAX):
        return TemperatureScale(T_MAX, clamped=True)

    lo, hi = math.log(T_MIN), math.log(T_MAX)
    mid = 0.5 * (lo + hi)
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        c = conf(math.exp(mid))
        if c == target:
            break
        # confidence falls as t grows
        if c > target:
            lo = mid
        else:
            hi = mid
    t = math.exp(mid)
    gap = abs(conf(t) - target)
    if gap > tol:
        raise ValidationError(
            f"bisection ended with confidence gap {gap:.3g} > tol {tol:.3g}"
        )
    return TemperatureScale(t)


@dataclass(frozen=True)
class ReliabilityReport:
    bin_edges: np.ndarray
    bin_counts: np.ndarray
    bin_confidence: np.ndarray
    bin_accuracy: np.ndarray
    ece: float
    mean_confidence: float
    accuracy: float

    @property
    def n_bins(self) -> int:
        return self.bin_counts.size

    def recompute_ece(self) -> float:
        n = self.bin_counts.sum()
        gaps = np.abs(self.bin_accuracy - self.bin_confidence)
        return float(np.sum(self.bin_counts / n * gaps))

    def to_dict(self):
        return {
            "bin_edges": self.bin_edges.tolist(),
            "bin_counts": self.bin_counts.tolist(),
            "bin_confidence": self.bin_confidence.tolist(),
            "bin_accuracy": self.bin_accuracy.tolist(),
            "ece": self.ece,
            "mean_confidence": self.mean_confidence,
            "accuracy": self.accuracy,
        }


def ece(d: LabeledScores, t=IDENTITY, bins: int = 10) -> ReliabilityReport:
    """Expected calibration error over equal-width, right-inclusive bins on (0, 1].

    Empty bins contribute nothing; their confidence and accuracy are reported as 0.
    """
    if bins < 1:
        raise ValidationError("need at least one bin")
    if d.row_count == 0:
        raise EmptyInputError("ECE of an empty dataset")
    scaled = as_scores(d.scores).scores / _t_value(t)
    probs = softmax_rows(scaled)
    conf = probs.max(axis=1)
    correct = (predict(scaled) == d.labels).astype(np.float64)

    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.searchsorted(edges, conf, side="left") - 1
    idx = np.clip(idx, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=bins)
    nonempty = counts > 0
    bin_conf = np.zeros(bins)
    bin_acc = np.zeros(bins)
    bin_conf[nonempty] = conf_sum[nonempty] / counts[nonempty]
    bin_acc[nonempty] = acc_sum[nonempty] / counts[nonempty]
    value = float(np.sum(counts / d.row_count * np.abs(bin_acc - bin_conf)))
    return ReliabilityReport(
        bin_edges=edges,
        bin_counts=counts,
        bin_confidence=bin_conf,
        bin_accuracy=bin_acc,
        ece=value,
        mean_confidence=float(conf.mean()),
        accuracy=float(correct.mean()),
    )
