"""Score matrices, softmax, argmax prediction and error rates.

Everything here works in float64 on ``(N, K)`` arrays of raw (pre-softmax)
scores. Functions accept either a :class:`ScoreSet` or anything
``np.asarray`` understands.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class EmptyInputError(ValidationError):
    """An operation that needs at least one row received none."""


class ShapeError(ValidationError):
    """Two inputs that must be aligned are not."""


def _as_matrix(scores) -> np.ndarray:
    arr = np.array(scores, dtype=np.float64, copy=True)
    if arr.ndim == 1 and arr.size == 0:
        raise ShapeError("cannot infer class count from an empty 1-d input")
    if arr.ndim != 2:
        raise ShapeError(f"scores must be a 2-d (rows, classes) matrix, got shape {arr.shape}")
    if arr.shape[1] < 2:
        raise ShapeError(f"need at least 2 classes, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("scores contain NaN or infinite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScoreSet:
    """Immutable ``(N, K)`` matrix of finite float64 scores."""

    scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "scores", _as_matrix(self.scores))

    @property
    def row_count(self) -> int:
        return self.scores.shape[0]

    @property
    def class_count(self) -> int:
        return self.scores.shape[1]

    def __len__(self):
        return self.row_count

    def scaled(self, factor: float) -> "ScoreSet":
        return ScoreSet(self.scores * factor)


ScoreLike = Union[ScoreSet, np.ndarray]


def as_scores(s) -> ScoreSet:
    return s if isinstance(s, ScoreSet) else ScoreSet(s)


@dataclass(frozen=True)
class LabeledScores:
    """A :class:`ScoreSet` with one class label per row, plus optional group ids."""

    scores: ScoreSet
    labels: np.ndarray
    groups: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        scores = as_scores(self.scores)
        labels = np.array(self.labels, copy=True)
        if labels.ndim != 1:
            raise ShapeError("labels must be 1-d")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            as_int = labels.astype(np.int64)
            if not np.array_equal(as_int, labels):
                raise ValidationError("labels must be integer class indices")
            labels = as_int
        labels = labels.astype(np.int64)
        if labels.shape[0] != scores.row_count:
            raise ShapeError(
                f"{labels.shape[0]} labels for {scores.row_count} score rows"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= scores.class_count):
            raise ValidationError(f"labels must lie in [0, {scores.class_count})")
        labels.setflags(write=False)
        groups = self.groups
        if groups is not None:
            groups = np.array(groups, dtype=np.int64, copy=True)
            if groups.shape != labels.shape:
                raise ShapeError("groups must have one entry per row")
            groups.setflags(write=False)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "groups", groups)

    @property
    def row_count(self) -> int:
        return self.scores.row_count

    @property
    def class_count(self) -> int:
        return self.scores.class_count

    def with_scores(self, scores) -> "LabeledScores":
        return LabeledScores(as_scores(scores), self.labels, self.groups)


@dataclass(frozen=True)
class ClassMarginals:
    """Per-class log prior ``m`` with ``m_y = log P(y)``."""

    log_probs: np.ndarray

    def __post_init__(self):
        m = np.array(self.log_probs, dtype=np.float64, copy=True)
        if m.ndim != 1 or m.size < 2:
            raise ShapeError("marginals must be a 1-d vector over at least 2 classes")
        p = np.exp(m)
        if not np.all(np.isfinite(m)) or np.any(p <= 0) or np.any(p > 1):
            raise ValidationError("class probabilities must lie in (0, 1]")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValidationError(f"class probabilities sum to {p.sum()!r}, not 1")
        m.setflags(write=False)
        object.__setattr__(self, "log_probs", m)

    @classmethod
    def uniform(cls, k: int) -> "ClassMarginals":
        return cls(np.full(k, -np.log(k)))

    @classmethod
    def from_probs(cls, probs) -> "ClassMarginals":
        p = np.asarray(probs, dtype=np.float64)
        return cls(np.log(p))

    @classmethod
    def from_labels(cls, labels, k: int, smoothing: float = 1.0) -> "ClassMarginals":
        """Empirical class frequencies with additive smoothing (keeps every log finite)."""
        counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=k)[:k]
        smoothed = counts + smoothing
        return cls(np.log(smoothed / smoothed.sum()))

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    @property
    def class_count(self) -> int:
        return self.log_probs.size

    def is_uniform(self, atol: float = 1e-12) -> bool:
        return bool(np.allclose(self.probs, 1.0 / self.class_count, rtol=0, atol=atol))


def _matrix(s) -> np.ndarray:
    return s.scores if isinstance(s, ScoreSet) else _as_matrix(s)


def log_softmax_rows(s) -> np.ndarray:
    x = _matrix(s)
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_rows(s) -> np.ndarray:
    """Row-wise softmax with max subtraction; safe for arbitrarily large logits."""
    x = _matrix(s)
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def predict(s) -> np.ndarray:
    """Argmax per row; ties go to the lowest class index."""
    return np.argmax(_matrix(s), axis=1)


def error_rate(d: LabeledScores) -> float:
    if d.row_count == 0:
        raise EmptyInputError("error rate of an empty dataset is undefined")
    wrong = int(np.count_nonzero(predict(d.scores) != d.labels))
    return wrong / d.row_count


def accuracy(d: LabeledScores) -> float:
    return 1.0 - error_rate(d)
