"""Score CSV files and JSON documents.

Score files have a header ``score_0, ..., score_{K-1}`` followed by optional
``label`` and ``group`` columns. Floats are written with ``repr`` (shortest
round-trip form), so a written file parses back to identical arrays.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .core import LabeledScores, ScoreSet, ValidationError

SCHEMA_VERSION = 1


class FormatError(ValidationError):
    """A file does not follow the expected layout."""


def _fmt(x: float) -> str:
    return repr(float(x))


def _parse_header(header, path):
    k = 0
    while k < len(header) and header[k] == f"score_{k}":
        k += 1
    if k < 2:
        raise FormatError(f"{path}: header must start with score_0, score_1, ...")
    rest = header[k:]
    allowed = (["label", "group"], ["label"], ["group"], [])
    if rest not in allowed:
        raise FormatError(f"{path}: unexpected columns after scores: {rest}")
    return k, "label" in rest, "group" in rest


def read_score_file(path):
    """Parse a score CSV into ``(ScoreSet, labels or None, groups or None)``."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    if not rows:
        raise FormatError(f"{path}: missing header")
    k, has_label, has_group = _parse_header([c.strip() for c in rows[0]], path)
    width = k + has_label + has_group
    scores = np.empty((len(rows) - 1, k))
    labels = np.empty(len(rows) - 1, dtype=np.int64) if has_label else None
    groups = np.empty(len(rows) - 1, dtype=np.int64) if has_group else None
    for i, row in enumerate(rows[1:]):
        if len(row) != width:
            raise FormatError(f"{path}:{i + 2}: expected {width} fields, got {len(row)}")
        try:
            scores[i] = [float(v) for v in row[:k]]
            if has_label:
                labels[i] = int(row[k])
            if has_group:
                groups[i] = int(row[k + has_label])
        except ValueError as exc:
            raise FormatError(f"{path}:{i + 2}: {exc}") from None
    if not np.all(np.isfinite(scores)):
        raise FormatError(f"{path}: non-finite score")
    try:
        return ScoreSet(scores), labels, groups
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}") from None


def read_labeled(path) -> LabeledScores:
    scores, labels, groups = read_score_file(path)
    if labels is None:
        raise FormatError(f"{path}: no label column")
    try:
        return LabeledScores(scores, labels, groups)
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_score_file(path, scores, labels=None, groups=None):
    s = scores.scores if isinstance(scores, ScoreSet) else np.asarray(scores, dtype=np.float64)
    header = [f"score_{j}" for j in range(s.shape[1])]
    if labels is not None:
        header.append("label")
    if groups is not None:
        header.append("group")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(s.shape[0]):
            row = [_fmt(x) for x in s[i]]
            if labels is not None:
                row.append(str(int(labels[i])))
            if groups is not None:
                row.append(str(int(groups[i])))
            w.writerow(row)


def write_labeled(path, d: LabeledScores):
    write_score_file(path, d.scores, d.labels, d.groups)


def write_conditionals(path, cond: np.ndarray, kinds):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"cond_{j}" for j in range(cond.shape[1])] + ["kind"])
        for i in range(cond.shape[0]):
            w.writerow([_fmt(x) for x in cond[i]] + [kinds[i]])


def read_conditionals(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    k = len(rows[0]) - 1
    cond = np.array([[float(v) for v in row[:k]] for row in rows[1:]]).reshape(-1, k)
    kinds = [row[k] for row in rows[1:]]
    return cond, kinds


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, allow_nan=False) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps(obj), encoding="utf-8")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from None
