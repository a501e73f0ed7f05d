"""Stylized world of ID-calibrated, conditionally independent model outputs.

Each model sees its own latent feature ``u | y ~ N(mean_y, sigma^2 I)``, drawn
independently of the other model's feature given the label. A model's score is
the exact log-posterior ``log P(y | u)`` under a uniform prior, so each model is
calibrated ID by construction and ``P(y | s, r) = softmax(s + r)``.

OOD sets reuse the ID marginal of score pairs and redraw the label from the
conditional that defines the shift:

============================  =========================================
shift                         label conditional given ``(s, r)``
============================  =========================================
``MissingSpurious``           ``softmax(r)``, with ``s`` replaced by 0
``Suppressed(tau)``           ``softmax(tau * (s + r))``
``Anticorrelated(a, b)``      ``softmax(a * r - b * s)``
``Mixture(w, A, B)``          row from ``A`` with probability ``w``
============================  =========================================

Random streams: a ``SeedSequence`` built from the seed is split into fixed
children (ID labels, standard latents, robust latents, OOD labels, mixture
coin), so every draw is reproducible bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .core import (
    ScoreSet,
    ValidationError,
    log_softmax_rows,
    predict,
    softmax_rows,
)
from .ensemble import WEIGHT_GRID


class UsageError(ValidationError):
    """Verification requested on a set that cannot support it."""


@dataclass(frozen=True)
class WorldSpec:
    means_std: np.ndarray
    means_rob: np.ndarray
    sigma_std: float = 1.0
    sigma_rob: float = 1.0
    seed: int = 0

    def __post_init__(self):
        ms = np.array(self.means_std, dtype=np.float64, copy=True)
        mr = np.array(self.means_rob, dtype=np.float64, copy=True)
        if ms.ndim != 2 or mr.ndim != 2:
            raise ValidationError("class means must be (classes, dim) matrices")
        if ms.shape[0] != mr.shape[0] or ms.shape[0] < 2:
            raise ValidationError("both models need the same class count K >= 2")
        if not (np.all(np.isfinite(ms)) and np.all(np.isfinite(mr))):
            raise ValidationError("class means must be finite")
        for name in ("sigma_std", "sigma_rob"):
            v = float(getattr(self, name))
            if not v > 0 or not math.isfinite(v):
                raise ValidationError(f"{name} must be positive")
            object.__setattr__(self, name, v)
        seed = int(self.seed)
        if not 0 <= seed < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")
        ms.setflags(write=False)
        mr.setflags(write=False)
        object.__setattr__(self, "means_std", ms)
        object.__setattr__(self, "means_rob", mr)
        object.__setattr__(self, "seed", seed)

    @classmethod
    def symmetric(cls, k: int, sep_std: float = 2.0, sep_rob: float = 1.5,
                  sigma_std: float = 1.0, sigma_rob: float = 1.0, seed: int = 0) -> "WorldSpec":
        """Class means at scaled simplex vertices, so relabeling classes is a symmetry."""
        eye = np.eye(k)
        return cls(sep_std * eye, sep_rob * eye, sigma_std, sigma_rob, seed)

    @property
    def class_count(self) -> int:
        return self.means_std.shape[0]

    @property
    def label_symmetric(self) -> bool:
        """True when, per model, all pairwise class-mean distances are equal.

        With a shared isotropic spread that makes every label permutation an
        isometry of the world, so resampled labels stay class-balanced.
        """
        for means in (self.means_std, self.means_rob):
            d = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
            off = d[~np.eye(len(means), dtype=bool)]
            if not np.allclose(off, off[0], rtol=1e-12, atol=1e-12):
                return False
        return True

    def with_seed(self, seed: int) -> "WorldSpec":
        return WorldSpec(self.means_std, self.means_rob, self.sigma_std, self.sigma_rob, seed)

    def to_dict(self):
        return {
            "means_std": self.means_std.tolist(),
            "means_rob": self.means_rob.tolist(),
            "sigma_std": self.sigma_std,
            "sigma_rob": self.sigma_rob,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d) -> "WorldSpec":
        if "symmetric" in d:
            sym = dict(d["symmetric"])
            return cls.symmetric(seed=int(d.get("seed", 0)), **sym)
        try:
            return cls(d["means_std"], d["means_rob"], d.get("sigma_std", 1.0),
                       d.get("sigma_rob", 1.0), d.get("seed", 0))
        except KeyError as exc:
            raise ValidationError(f"world spec missing field {exc}") from None


# -- shifts -------------------------------------------------------------------

@dataclass(frozen=True)
class MissingSpurious:
    kind = "missing"

    def __str__(self):
        return "missing"


@dataclass(frozen=True)
class Suppressed:
    tau: float
    kind = "suppressed"

    def __post_init__(self):
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValidationError("suppressed shift needs tau > 0")

    def __str__(self):
        return f"suppressed:tau={self.tau!r}"


@dataclass(frozen=True)
class Anticorrelated:
    alpha: float
    beta: float
    kind = "anticorrelated"

    def __post_init__(self):
        for v in (self.alpha, self.beta):
            if not (v > 0 and math.isfinite(v)):
                raise ValidationError("anticorrelated shift needs alpha, beta > 0")

    def __str__(self):
        return f"anticorrelated:alpha={self.alpha!r},beta={self.beta!r}"


@dataclass(frozen=True)
class Mixture:
    weight: float
    a: "ShiftSpec"
    b: "ShiftSpec"
    kind = "mixture"

    def __post_init__(self):
        if not 0.0 <= self.weight <= 1.0:
            raise ValidationError("mixture weight must lie in [0, 1]")
        if isinstance(self.a, Mixture) or isinstance(self.b, Mixture):
            raise ValidationError("mixtures may not be nested")
        for comp in (self.a, self.b):
            if not isinstance(comp, (MissingSpurious, Suppressed, Anticorrelated)):
                raise ValidationError(f"invalid mixture component {comp!r}")

    def __str__(self):
        return f"mix:w={self.weight!r},a=({self.a}),b=({self.b})"


ShiftSpec = Union[MissingSpurious, Suppressed, Anticorrelated, Mixture]

ROW_KINDS = ("id", "missing", "suppressed", "anticorrelated")


@dataclass(frozen=True)
class SampledShiftSet:
    """Sampled score pairs, labels, and the exact label posterior used for each row.

    ``row_kind`` holds an index into :data:`ROW_KINDS` per row.
    """

    std_scores: ScoreSet
    rob_scores: ScoreSet
    labels: np.ndarray
    exact_conditionals: np.ndarray
    row_kind: np.ndarray
    label_symmetric: bool = False
    description: str = "id"

    def __post_init__(self):
        for name in ("labels", "exact_conditionals", "row_kind"):
            getattr(self, name).setflags(write=False)

    @property
    def row_count(self) -> int:
        return self.labels.shape[0]

    @property
    def class_count(self) -> int:
        return self.exact_conditionals.shape[1]

    def rows_of(self, kind: str) -> np.ndarray:
        return self.row_kind == ROW_KINDS.index(kind)

    def labeled(self):
        from .core import LabeledScores
        return (LabeledScores(self.std_scores, self.labels),
                LabeledScores(self.rob_scores, self.labels))


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    names = ("labels", "std", "rob", "ood_labels", "mixture")
    return {n: np.random.Generator(np.random.PCG64(child)) for n, child in zip(names, ss.spawn(len(names)))}


def _model_scores(rng, labels, means, sigma):
    n, dim = labels.shape[0], means.shape[1]
    u = means[labels] + sigma * rng.standard_normal((n, dim))
    sq = ((u[:, None, :] - means[None, :, :]) ** 2).sum(axis=-1)
    return log_softmax_rows(-sq / (2.0 * sigma * sigma))


def _draw_labels(rng, probs):
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    labels = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(labels, probs.shape[1] - 1).astype(np.int64)


def _id_pairs(world: WorldSpec, n: int, streams):
    if n < 1:
        raise ValidationError("n must be >= 1")
    labels = streams["labels"].integers(0, world.class_count, size=n)
    s = _model_scores(streams["std"], labels, world.means_std, world.sigma_std)
    r = _model_scores(streams["rob"], labels, world.means_rob, world.sigma_rob)
    return labels.astype(np.int64), s, r


def sample_id(world: WorldSpec, n: int, seed: Optional[int] = None) -> SampledShiftSet:
    streams = _streams(world.seed if seed is None else seed)
    labels, s, r = _id_pairs(world, n, streams)
    cond = softmax_rows(s + r)
    return SampledShiftSet(
        ScoreSet(s), ScoreSet(r), labels, cond,
        np.zeros(n, dtype=np.int8), world.label_symmetric, "id",
    )


def _conditional(shift, s, r, class_log_shift):
    if isinstance(shift, MissingSpurious):
        s = np.zeros_like(s)
        logits = r
    elif isinstance(shift, Suppressed):
        logits = shift.tau * (s + r)
    elif isinstance(shift, Anticorrelated):
        logits = shift.alpha * r - shift.beta * s
    else:  # pragma: no cover
        raise ValidationError(f"not a leaf shift: {shift!r}")
    if class_log_shift is not None:
        logits = logits + class_log_shift
    return s, softmax_rows(logits)


def sample_ood(world: WorldSpec, shift: ShiftSpec, n: int, seed: Optional[int] = None,
               class_log_shift=None) -> SampledShiftSet:
    """Sample an OOD set under ``shift``.

    ``class_log_shift`` (experimental) adds a per-class log-prior offset to the
    label conditional, moving the OOD class marginals away from ID.
    """
    if not isinstance(shift, (MissingSpurious, Suppressed, Anticorrelated, Mixture)):
        raise ValidationError(f"unknown shift {shift!r}")
    if class_log_shift is not None:
        class_log_shift = np.asarray(class_log_shift, dtype=np.float64)
        if class_log_shift.shape != (world.class_count,):
            raise ValidationError("class_log_shift needs one entry per class")
    streams = _streams(world.seed if seed is None else seed)
    _, s, r = _id_pairs(world, n, streams)

    if isinstance(shift, Mixture):
        pick_a = streams["mixture"].random(n) < shift.weight
        s_a, cond_a = _conditional(shift.a, s, r, class_log_shift)
        s_b, cond_b = _conditional(shift.b, s, r, class_log_shift)
        std = np.where(pick_a[:, None], s_a, s_b)
        cond = np.where(pick_a[:, None], cond_a, cond_b)
        kind = np.where(pick_a, ROW_KINDS.index(shift.a.kind), ROW_KINDS.index(shift.b.kind))
    else:
        std, cond = _conditional(shift, s, r, class_log_shift)
        kind = np.full(n, ROW_KINDS.index(shift.kind))
    labels = _draw_labels(streams["ood_labels"], cond)
    return SampledShiftSet(
        ScoreSet(std), ScoreSet(r), labels, cond, kind.astype(np.int8),
        world.label_symmetric and class_log_shift is None, str(shift),
    )


# -- exact error bookkeeping --------------------------------------------------

def expected_error(cond: np.ndarray, predictions: np.ndarray) -> float:
    """Mean over rows of ``1 - P(Y = prediction | row)``: error with no label noise."""
    rows = np.arange(cond.shape[0])
    return float(np.mean(1.0 - cond[rows, predictions]))


def empirical_error(labels: np.ndarray, predictions: np.ndarray) -> float:
    return float(np.count_nonzero(labels != predictions)) / labels.shape[0]


def _binomial_slack_ok(labels, pred_a, pred_b, sigmas=3.0):
    """Paired test that ``err(a) <= err(b)`` up to ``sigmas`` standard errors."""
    d = (pred_a != labels).astype(np.float64) - (pred_b != labels).astype(np.float64)
    n = d.shape[0]
    se = d.std(ddof=1) / math.sqrt(n) if n > 1 else 0.0
    return bool(d.mean() <= sigmas * se), float(d.mean()), float(se)


def challenger_panel(s: np.ndarray, r: np.ndarray, seed: int = 0):
    """Predictions of alternative combiners of (s, r), keyed by name."""
    panel = {}
    ls, lr = log_softmax_rows(s), log_softmax_rows(r)
    for a in WEIGHT_GRID:
        panel[f"logits_alpha={a:.1f}"] = predict(a * s + (1 - a) * r)
        if 0 < a < 1:
            mix = np.logaddexp(math.log(a) + ls, math.log1p(-a) + lr)
        else:
            mix = ls if a == 1 else lr
        panel[f"probs_alpha={a:.1f}"] = predict(mix)
    ps, pr = predict(s), predict(r)
    std_conf, rob_conf = ls.max(axis=1), lr.max(axis=1)
    panel["max_confidence"] = np.where(std_conf >= rob_conf, ps, pr)
    panel["min_confidence"] = np.where(std_conf < rob_conf, ps, pr)
    coin = np.random.default_rng(seed).random(s.shape[0]) < 0.5
    panel["random_mixer"] = np.where(coin, ps, pr)
    return panel


@dataclass
class VerdictReport:
    proposition: str
    passed: bool
    checks: dict = field(default_factory=dict)
    evidence: dict = field(default_factory=dict)
    first_violation: Optional[dict] = None
    notes: list = field(default_factory=list)

    def check(self, name: str, ok: bool, violation: Optional[dict] = None):
        self.checks[name] = bool(ok)
        if not ok:
            self.passed = False
            if self.first_violation is None:
                self.first_violation = {"check": name, **(violation or {})}

    def to_dict(self):
        return {
            "proposition": self.proposition,
            "verdict": "PASS" if self.passed else "FAIL",
            "checks": self.checks,
            "evidence": self.evidence,
            "first_violation": self.first_violation,
            "notes": self.notes,
        }


def _first_false(mask: np.ndarray) -> Optional[int]:
    bad = np.flatnonzero(~mask)
    return int(bad[0]) if bad.size else None


def _preds(ss: SampledShiftSet):
    s, r = ss.std_scores.scores, ss.rob_scores.scores
    return s, r, predict(s), predict(r), predict(s + r)


def _verify_prop1(ss: SampledShiftSet, seed: int) -> VerdictReport:
    if not np.all(ss.rows_of("id")):
        raise UsageError("the ID optimality check needs an in-distribution set")
    rep = VerdictReport("1", True)
    s, r, j_std, j_rob, j_ens = _preds(ss)
    cond = ss.exact_conditionals
    rows = np.arange(ss.row_count)
    best = cond.max(axis=1)
    p_ens = cond[rows, j_ens]
    ok = p_ens >= best
    i = _first_false(ok)
    rep.check("ensemble_row_bayes_optimal", ok.all(),
              None if i is None else {"row": i, "p_ens": float(p_ens[i]), "p_best": float(best[i])})
    ok = (p_ens >= cond[rows, j_std]) & (p_ens >= cond[rows, j_rob])
    i = _first_false(ok)
    rep.check("ensemble_row_dominates_members", ok.all(), None if i is None else {"row": i})

    err = {name: expected_error(cond, p) for name, p in (("std", j_std), ("rob", j_rob), ("ens", j_ens))}
    rep.evidence["expected_error"] = err
    rep.check("expected_error_ens_le_std", err["ens"] <= err["std"])
    rep.check("expected_error_ens_le_rob", err["ens"] <= err["rob"])

    mc = {}
    for other, p in (("std", j_std), ("rob", j_rob)):
        ok, diff, se = _binomial_slack_ok(ss.labels, j_ens, p)
        mc[other] = {"error_difference": diff, "standard_error": se}
        rep.check(f"monte_carlo_ens_le_{other}", ok, {"difference": diff, "se": se})
    mc["empirical_error"] = {name: empirical_error(ss.labels, p)
                             for name, p in (("std", j_std), ("rob", j_rob), ("ens", j_ens))}
    rep.evidence["monte_carlo"] = mc

    challengers = {}
    worst_margin = math.inf
    for name, pred in challenger_panel(s, r, seed).items():
        e = expected_error(cond, pred)
        challengers[name] = e
        worst_margin = min(worst_margin, e - err["ens"])
        rep.check(f"challenger_{name}", err["ens"] <= e, {"challenger_error": e, "ens_error": err["ens"]})
    rep.evidence["challenger_expected_error"] = challengers
    rep.evidence["min_challenger_margin"] = worst_margin
    return rep


def _verify_prop2(ss: SampledShiftSet) -> VerdictReport:
    missing, supp = ss.rows_of("missing"), ss.rows_of("suppressed")
    if not np.all(missing | supp):
        raise UsageError("this check needs rows from missing-spurious or suppressed shifts only")
    rep = VerdictReport("2", True)
    s, r, j_std, j_rob, j_ens = _preds(ss)
    cond = ss.exact_conditionals
    rows = np.arange(ss.row_count)

    ok = (j_ens == j_rob) | ~missing
    i = _first_false(ok)
    rep.check("missing_rows_ens_equals_rob", ok.all(), None if i is None else {"row": i})
    p_ens = cond[rows, j_ens]
    ok = (p_ens >= cond.max(axis=1)) | ~supp
    i = _first_false(ok)
    rep.check("suppressed_rows_ens_bayes_optimal", ok.all(), None if i is None else {"row": i})
    rep.evidence["rows"] = {"missing": int(missing.sum()), "suppressed": int(supp.sum())}

    err = {name: expected_error(cond, p) for name, p in (("std", j_std), ("rob", j_rob), ("ens", j_ens))}
    rep.evidence["expected_error"] = err
    if ss.label_symmetric:
        rep.check("expected_error_ens_le_std", err["ens"] <= err["std"])
        rep.check("expected_error_ens_le_rob", err["ens"] <= err["rob"])
        freq = np.bincount(ss.labels, minlength=ss.class_count) / ss.row_count
        rep.evidence["label_frequencies"] = freq.tolist()
    else:
        rep.notes.append(
            "world is not label-symmetric: class balance is not guaranteed, "
            "so only the per-row checks were run"
        )
    return rep


def _verify_prop3(ss: SampledShiftSet) -> VerdictReport:
    if not np.all(ss.rows_of("anticorrelated")):
        raise UsageError("this check needs an anticorrelated-shift set")
    rep = VerdictReport("3", True)
    s, r, j_std, j_rob, j_ens = _preds(ss)
    cond = ss.exact_conditionals
    rows = np.arange(ss.row_count)
    p_rob, p_ens, p_std = cond[rows, j_rob], cond[rows, j_ens], cond[rows, j_std]
    ok = p_rob >= p_ens
    i = _first_false(ok)
    rep.check("row_rob_ge_ens", ok.all(),
              None if i is None else {"row": i, "p_rob": float(p_rob[i]), "p_ens": float(p_ens[i])})
    ok = p_ens >= p_std
    i = _first_false(ok)
    rep.check("row_ens_ge_std", ok.all(),
              None if i is None else {"row": i, "p_ens": float(p_ens[i]), "p_std": float(p_std[i])})
    err = {name: expected_error(cond, p) for name, p in (("std", j_std), ("rob", j_rob), ("ens", j_ens))}
    rep.evidence["expected_error"] = err
    rep.check("expected_error_rob_le_ens", err["rob"] <= err["ens"])
    rep.check("expected_error_ens_le_std", err["ens"] <= err["std"])
    rep.evidence["empirical_error"] = {name: empirical_error(ss.labels, p)
                                       for name, p in (("std", j_std), ("rob", j_rob), ("ens", j_ens))}
    return rep


def verify_proposition(ss: SampledShiftSet, which, seed: int = 0) -> VerdictReport:
    """Check the ID optimality (1), missing/suppressed (2) or anticorrelated (3) claims.

    Per-row checks compare exact posteriors with no tolerance; aggregate checks
    use expected errors computed from those posteriors, so they carry no
    sampling noise. ``seed`` drives the random-mixer challenger only.
    """
    which = str(which)
    if which == "1":
        rep = _verify_prop1(ss, seed)
    elif which == "2":
        rep = _verify_prop2(ss)
    elif which == "3":
        rep = _verify_prop3(ss)
    else:
        raise UsageError(f"unknown proposition {which!r}")
    rep.evidence["n"] = ss.row_count
    rep.evidence["shift"] = ss.description
    return rep


def miscalibration_penalty(world: WorldSpec, shift: ShiftSpec, m_factor: float,
                           n_val: int, n_test: int, seed: int = 0) -> dict:
    """OOD expected error of the raw logit sum vs the calibrated logit sum
    when the standard model's scores are inflated by ``m_factor``.
    """
    from .core import LabeledScores
    from .ensemble import EnsembleConfig, Strategy, build_calibrated_ensemble, combine

    val = sample_id(world, n_val, seed=seed)
    std_val = LabeledScores(val.std_scores.scaled(m_factor), val.labels)
    rob_val = LabeledScores(val.rob_scores, val.labels)
    cfg = build_calibrated_ensemble(std_val, rob_val, Strategy.CALIBRATED_LOGITS)
    test = sample_ood(world, shift, n_test, seed=seed + 1)
    std_t = test.std_scores.scaled(m_factor)
    raw = predict(combine(std_t, test.rob_scores, EnsembleConfig(Strategy.LOGITS)))
    cal = predict(combine(std_t, test.rob_scores, cfg))
    cond = test.exact_conditionals
    return {
        "t_std": cfg.t_std.t,
        "t_rob": cfg.t_rob.t,
        "logits_error": expected_error(cond, raw),
        "calibrated_logits_error": expected_error(cond, cal),
        "std_error": expected_error(cond, predict(std_t)),
        "rob_error": expected_error(cond, predict(test.rob_scores)),
    }
