"""Exact finite joint distributions over (standard score, robust score, label).

A :class:`JointTable` is built from two finite score supports and class
marginals so that each model is exactly calibrated and the two are
conditionally independent given the label. On such tables the Bayes error,
the softmax form of the joint posterior, and optimality of the ensemble over
every deterministic combiner can be checked by enumeration.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import nnls

from . import kernels
from .core import ClassMarginals, ValidationError, softmax_rows
from .synthetic import VerdictReport

MAX_CELLS = 12
MAX_COMBINERS = 2**20
FEASIBILITY_TOL = 1e-12
_CHUNK = 1 << 16


class InfeasibleError(ValidationError):
    """No nonnegative score weights satisfy the calibration constraints."""


class SizeError(ValidationError):
    """Exhaustive enumeration requested on a table that is too large."""


@dataclass(frozen=True)
class JointTable:
    """``probs[i, j, y] = P(s = s_values[i], r = r_values[j], y)``."""

    s_values: np.ndarray
    r_values: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        s = np.array(self.s_values, dtype=np.float64, copy=True)
        r = np.array(self.r_values, dtype=np.float64, copy=True)
        p = np.array(self.probs, dtype=np.float64, copy=True)
        if s.ndim != 2 or r.ndim != 2 or p.ndim != 3:
            raise ValidationError("supports must be 2-d and probs 3-d")
        if p.shape != (s.shape[0], r.shape[0], s.shape[1]) or r.shape[1] != s.shape[1]:
            raise ValidationError(f"probs shape {p.shape} does not match supports")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValidationError("joint probabilities must be nonnegative and sum to 1")
        for a in (s, r, p):
            a.setflags(write=False)
        object.__setattr__(self, "s_values", s)
        object.__setattr__(self, "r_values", r)
        object.__setattr__(self, "probs", p)
        self._validate_structure()

    def _validate_structure(self, tol: float = 1e-12):
        p = self.probs
        py = p.sum(axis=(0, 1))
        if np.any(py <= 0):
            raise ValidationError("every class needs positive probability")
        ps_y = p.sum(axis=1) / py
        pr_y = p.sum(axis=0) / py
        factored = ps_y[:, None, :] * pr_y[None, :, :] * py
        if np.max(np.abs(factored - p)) > tol:
            raise ValidationError("table violates conditional independence of s and r given y")
        for name, marg, support in (("standard", p.sum(axis=1), self.s_values),
                                    ("robust", p.sum(axis=0), self.r_values)):
            mass = marg.sum(axis=1)
            live = mass > 0
            post = marg[live] / mass[live][:, None]
            if np.max(np.abs(post - softmax_rows(support[live])), initial=0.0) > tol:
                raise ValidationError(f"{name} scores are not calibrated on this table")

    @property
    def class_count(self) -> int:
        return self.s_values.shape[1]

    @property
    def shape(self):
        return self.probs.shape

    @property
    def n_cells(self) -> int:
        return self.s_values.shape[0] * self.r_values.shape[0]

    @property
    def class_probs(self) -> np.ndarray:
        return self.probs.sum(axis=(0, 1))

    @property
    def marginals(self) -> ClassMarginals:
        return ClassMarginals(np.log(self.class_probs))

    @property
    def cell_mass(self) -> np.ndarray:
        return self.probs.sum(axis=2)

    def conditional(self) -> np.ndarray:
        """``P(y | s, r)`` per cell; zero-mass cells get a uniform row."""
        mass = self.cell_mass[..., None]
        k = self.class_count
        return np.where(mass > 0, self.probs / np.where(mass > 0, mass, 1.0), 1.0 / k)

    def to_dict(self):
        return {
            "s_support": self.s_values.tolist(),
            "r_support": self.r_values.tolist(),
            "marginals": self.class_probs.tolist(),
        }


def _solve_weights(support: np.ndarray, py: np.ndarray, name: str) -> np.ndarray:
    a = softmax_rows(support).T  # (K, |support|)
    w, _ = nnls(a, py)
    resid = float(np.max(np.abs(a @ w - py)))
    if resid > FEASIBILITY_TOL:
        raise InfeasibleError(
            f"{name} support: no nonnegative weights w with sum_s w_s softmax(s)_y = P(y) "
            f"for all y (best residual {resid:.3g})"
        )
    return w


def make_joint_table(k: int, s_support, r_support, class_marginals) -> JointTable:
    """Build the calibrated, conditionally independent table for the given supports.

    Score-point weights ``w_s = P(s)`` solve ``sum_s w_s softmax(s)_y = P(y)``
    with ``w >= 0`` (nonnegative least squares). Then
    ``P(s | y) = w_s softmax(s)_y / P(y)`` and likewise for ``r``. When the
    system is underdetermined the solver picks one nonnegative solution;
    support points it leaves with zero weight carry no mass.
    """
    s = np.atleast_2d(np.asarray(s_support, dtype=np.float64))
    r = np.atleast_2d(np.asarray(r_support, dtype=np.float64))
    if s.size == 0 or r.size == 0:
        raise ValidationError("supports must be non-empty")
    if s.shape[1] != k or r.shape[1] != k:
        raise ValidationError(f"support vectors must have {k} entries")
    if isinstance(class_marginals, ClassMarginals):
        py = class_marginals.probs
    else:
        py = np.asarray(class_marginals, dtype=np.float64)
        ClassMarginals.from_probs(py)  # validates
    py = py / py.sum()
    if py.shape != (k,):
        raise ValidationError("marginals need one entry per class")
    ws = _solve_weights(s, py, "standard")
    wr = _solve_weights(r, py, "robust")
    ps_y = ws[:, None] * softmax_rows(s) / py
    pr_y = wr[:, None] * softmax_rows(r) / py
    # renormalise away the nnls residual so each conditional sums to exactly 1
    ps_y /= ps_y.sum(axis=0, keepdims=True)
    pr_y /= pr_y.sum(axis=0, keepdims=True)
    probs = ps_y[:, None, :] * pr_y[None, :, :] * py
    probs /= probs.sum()
    return JointTable(s, r, probs)


def bayes_error(t: JointTable) -> float:
    """``sum_{s,r} P(s, r) * (1 - max_y P(y | s, r))``."""
    return float(np.sum(t.cell_mass * (1.0 - t.conditional().max(axis=2))))


def combiner_error(t: JointTable, h: np.ndarray) -> float:
    """Error of the combiner ``h[i, j]`` via the per-cell posterior."""
    cond = t.conditional()
    i, j = np.indices(h.shape)
    return float(np.sum(t.cell_mass * (1.0 - cond[i, j, h])))


def combiner_error_direct(t: JointTable, h: np.ndarray) -> float:
    """Error of ``h`` as the total joint mass on ``y != h(s, r)``."""
    wrong = np.arange(t.class_count)[None, None, :] != h[..., None]
    return float(np.sum(t.probs[wrong]))


def ensemble_combiner(t: JointTable, use_marginals: bool = True) -> np.ndarray:
    m = t.marginals.log_probs if use_marginals else 0.0
    z = t.s_values[:, None, :] + t.r_values[None, :, :] - m
    return np.argmax(z, axis=2)


def check_lemma_softmax(t: JointTable, drop_marginal: bool = False, tol: float = 1e-9) -> VerdictReport:
    """Compare each cell's exact ``P(y | s, r)`` with ``softmax(s + r - m)``.

    ``drop_marginal`` omits ``m``; on non-uniform marginals that must fail.
    """
    rep = VerdictReport("lemma", True)
    live = t.cell_mass > 0
    cond = t.conditional()
    m = t.marginals.log_probs
    z = t.s_values[:, None, :] + t.r_values[None, :, :]
    if not drop_marginal:
        z = z - m
    pred = softmax_rows(z.reshape(-1, t.class_count)).reshape(cond.shape)
    dev = np.abs(pred - cond).max(axis=2)
    dev = np.where(live, dev, 0.0)
    max_dev = float(dev.max())
    worst = np.unravel_index(int(np.argmax(dev)), dev.shape)
    rep.evidence.update({
        "max_deviation": max_dev,
        "tolerance": tol,
        "drop_marginal": drop_marginal,
        "uniform_marginals": t.marginals.is_uniform(),
        "cells": int(live.sum()),
    })
    rep.check("softmax_form", max_dev <= tol,
              {"cell": [int(worst[0]), int(worst[1])], "deviation": max_dev})
    if t.marginals.is_uniform() and not drop_marginal:
        bal = softmax_rows(
            (t.s_values[:, None, :] + t.r_values[None, :, :]).reshape(-1, t.class_count)
        ).reshape(cond.shape)
        bal_dev = float(np.where(live, np.abs(bal - cond).max(axis=2), 0.0).max())
        rep.evidence["balanced_form_deviation"] = bal_dev
        rep.check("balanced_form", bal_dev <= tol)
    return rep


def check_prop1_exhaustive(t: JointTable, tol: float = 1e-12) -> VerdictReport:
    """Enumerate every deterministic combiner of (s, r) and compare with the ensemble."""
    cells = t.n_cells
    k = t.class_count
    if cells > MAX_CELLS or k**cells > MAX_COMBINERS:
        raise SizeError(
            f"{cells} cells / {k**cells} combiners is too many to enumerate; "
            "use the sampled challenger panel (verify --prop 1) instead"
        )
    rep = VerdictReport("prop1-exhaustive", True)
    mass = t.cell_mass.reshape(-1)
    cond = t.conditional().reshape(cells, k)
    total = k**cells
    best, best_idx = math.inf, -1
    for start in range(0, total, _CHUNK):
        errs = kernels.combiner_errors(mass, cond, start, min(start + _CHUNK, total))
        i = int(np.argmin(errs))
        if errs[i] < best:
            best, best_idx = float(errs[i]), start + i
    h_ens = ensemble_combiner(t)
    ens_err = combiner_error(t, h_ens)
    bayes = bayes_error(t)
    rep.evidence.update({
        "cells": cells,
        "combiners": total,
        "ensemble_error": ens_err,
        "bayes_error": bayes,
        "best_enumerated_error": best,
        "best_enumerated_index": best_idx,
        "tolerance": tol,
        "backend": kernels.current_backend(),
    })
    rep.check("ensemble_equals_bayes", abs(ens_err - bayes) <= tol,
              {"ensemble_error": ens_err, "bayes_error": bayes})
    rep.check("ensemble_le_every_combiner", ens_err <= best + tol,
              {"combiner_index": best_idx, "combiner_error": best})
    return rep


def check_corollary_trivial_bound(t: JointTable) -> VerdictReport:
    rep = VerdictReport("corollary", True)
    bayes = bayes_error(t)
    bound = 1.0 - float(t.class_probs.max())
    rep.evidence.update({"bayes_error": bayes, "bound": bound})
    rep.check("bayes_le_majority_bound", bayes <= bound + 1e-12,
              {"bayes_error": bayes, "bound": bound})
    return rep


# -- fixture corpus -------------------------------------------------------------

def _cyclic_support(v: np.ndarray) -> np.ndarray:
    return np.stack([np.roll(v, i) for i in range(v.size)])


def fixture_corpus(count: int = 24, seed: int = 0, max_cells: int = MAX_CELLS) -> list:
    """Deterministic list of feasible tables, half with uniform class marginals.

    Uniform tables use cyclic-shift supports (each is feasible with equal
    weights); non-uniform tables draw random supports and weights and take
    ``P(y)`` from the standard side, retrying until the robust side is feasible.
    """
    log3 = math.log(3.0)
    tables = [
        make_joint_table(2, [[0.0, 0.0]], [[0.0, 0.0]], [0.5, 0.5]),
        make_joint_table(2, [[log3, 0.0], [0.0, log3]], [[log3, 0.0], [0.0, log3]], [0.5, 0.5]),
    ]
    rng = np.random.default_rng(seed)
    attempts = 0
    while len(tables) < count:
        attempts += 1
        if attempts > 10_000:  # pragma: no cover
            raise RuntimeError("could not generate enough feasible fixtures")
        k = int(rng.choice([2, 3]))
        if len(tables) % 2 == 0:
            s = _cyclic_support(rng.normal(0, 1.5, size=k))
            r = _cyclic_support(rng.normal(0, 1.5, size=k))
            if rng.random() < 0.5 and k == 2:
                r = np.vstack([r, _cyclic_support(rng.normal(0, 1.0, size=k))])
            py = np.full(k, 1.0 / k)
        else:
            n_s = int(rng.integers(1, 5))
            n_r = int(rng.integers(1, 5))
            s = rng.normal(0, 1.5, size=(n_s, k))
            r = rng.normal(0, 1.5, size=(n_r, k))
            w = rng.dirichlet(np.ones(n_s))
            py = w @ softmax_rows(s)
            if np.allclose(py, 1.0 / k, atol=1e-3):
                continue
        if s.shape[0] * r.shape[0] > max_cells:
            continue
        try:
            tables.append(make_joint_table(k, s, r, py))
        except InfeasibleError:
            continue
        except ValidationError:
            continue
    return tables


def table_from_dict(d) -> JointTable:
    try:
        s, r = d["s_support"], d["r_support"]
        py = d.get("marginals")
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"table spec missing field {exc}") from None
    k = len(s[0])
    if py is None:
        py = [1.0 / k] * k
    return make_joint_table(k, s, r, py)
