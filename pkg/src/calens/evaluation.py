"""ID/OOD accuracy tables, gap-closed metric, and cross-dataset averages."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .core import EmptyInputError, LabeledScores, ShapeError, ValidationError, predict
from .ensemble import EnsembleConfig, combine

STANDARD = "standard"
ROBUST = "robust"

ModelSpec = Union[str, EnsembleConfig]
TestPair = Tuple[LabeledScores, LabeledScores]


@dataclass(frozen=True)
class EvalRow:
    model: str
    id_accuracy: float
    ood_accuracy: Optional[float] = None
    id_std: Optional[float] = None
    ood_std: Optional[float] = None
    id_worst_group: Optional[float] = None
    ood_worst_group: Optional[float] = None

    def __post_init__(self):
        for name in ("id_accuracy", "ood_accuracy", "id_worst_group", "ood_worst_group"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 100.0:
                raise ValidationError(f"{name}={v!r} is not a percentage")

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items() if v is not None or k == "ood_accuracy"}

    @classmethod
    def from_dict(cls, d) -> "EvalRow":
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__ if k in d})


def worst_group_accuracy(labels: np.ndarray, pred: np.ndarray, groups: np.ndarray) -> float:
    """Minimum per-group accuracy, as a fraction."""
    accs = []
    for g in np.unique(groups):
        mask = groups == g
        accs.append(np.count_nonzero(pred[mask] == labels[mask]) / np.count_nonzero(mask))
    return float(min(accs))


def _align(pair: TestPair):
    std, rob = pair
    if std.scores.scores.shape != rob.scores.scores.shape:
        raise ShapeError("standard and robust test sets have different shapes")
    if not np.array_equal(std.labels, rob.labels):
        raise ValidationError("standard and robust test labels differ")
    if std.row_count == 0:
        raise EmptyInputError("empty test set")
    return std, rob


def _predictions(spec: ModelSpec, std: LabeledScores, rob: LabeledScores) -> np.ndarray:
    if isinstance(spec, EnsembleConfig):
        return predict(combine(std.scores, rob.scores, spec))
    if spec == STANDARD:
        return predict(std.scores)
    if spec == ROBUST:
        return predict(rob.scores)
    raise ValidationError(f"unknown model spec {spec!r}")


def _score(spec, pair):
    std, rob = _align(pair)
    pred = _predictions(spec, std, rob)
    acc = 100.0 * np.count_nonzero(pred == std.labels) / std.row_count
    groups = std.groups if std.groups is not None else rob.groups
    wga = None
    if groups is not None:
        wga = 100.0 * worst_group_accuracy(std.labels, pred, groups)
    return float(acc), wga


def evaluate_models(models: Mapping[str, ModelSpec], id_test: TestPair,
                    ood_test: Optional[TestPair] = None) -> list:
    """One :class:`EvalRow` per named model, in mapping order.

    A model spec is ``"standard"``, ``"robust"`` or a fitted
    :class:`EnsembleConfig`.
    """
    rows = []
    for name, spec in models.items():
        id_acc, id_wga = _score(spec, id_test)
        ood_acc = ood_wga = None
        if ood_test is not None:
            ood_acc, ood_wga = _score(spec, ood_test)
        rows.append(EvalRow(name, id_acc, ood_acc, id_worst_group=id_wga, ood_worst_group=ood_wga))
    return rows


@dataclass(frozen=True)
class GapClosed:
    fraction: float
    degenerate: bool = False

    def to_dict(self):
        return {"fraction": None if self.degenerate else self.fraction, "degenerate": self.degenerate}


def gap_closed(std_acc: float, rob_acc: float, ens_acc: float) -> GapClosed:
    """Share of the std/rob accuracy gap recovered by the ensemble (symmetric in std, rob)."""
    lo, hi = min(std_acc, rob_acc), max(std_acc, rob_acc)
    if hi - lo < 1e-9:
        return GapClosed(float("nan"), True)
    return GapClosed((ens_acc - lo) / (hi - lo))


@dataclass(frozen=True)
class ModelAverage:
    model: str
    id_mean: float
    ood_mean: Optional[float]
    datasets: int
    by_tag: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "model": self.model,
            "id_mean": self.id_mean,
            "ood_mean": self.ood_mean,
            "datasets": self.datasets,
            "by_tag": self.by_tag,
        }


def _mean(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return float(sum(sorted(vals)) / len(vals))


def aggregate(rows: Mapping[str, Sequence[EvalRow]],
              dataset_tags: Optional[Mapping[str, str]] = None) -> dict:
    """Unweighted mean accuracy per model across datasets, overall and per tag.

    ``rows`` maps dataset name to that dataset's rows. Values are summed in
    sorted order so the result does not depend on dataset order.
    """
    if not rows:
        raise EmptyInputError("nothing to aggregate")
    tags = dict(dataset_tags or {})
    per_model: dict = {}
    for dataset, ds_rows in rows.items():
        for row in ds_rows:
            per_model.setdefault(row.model, []).append((dataset, row))
    out = {}
    for model, entries in per_model.items():
        if not entries:
            raise EmptyInputError(f"no rows for {model}")
        by_tag = {}
        for tag in sorted({tags.get(ds, "untagged") for ds, _ in entries}):
            sel = [r for ds, r in entries if tags.get(ds, "untagged") == tag]
            by_tag[tag] = {
                "id_mean": _mean(r.id_accuracy for r in sel),
                "ood_mean": _mean(r.ood_accuracy for r in sel),
                "datasets": len(sel),
            }
        out[model] = ModelAverage(
            model,
            _mean(r.id_accuracy for _, r in entries),
            _mean(r.ood_accuracy for _, r in entries),
            len(entries),
            by_tag,
        )
    return out
