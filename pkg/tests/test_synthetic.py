import math

import numpy as np
import pytest

from calens.core import ValidationError, predict, softmax_rows
from calens.synthetic import (
    Anticorrelated,
    MissingSpurious,
    Mixture,
    Suppressed,
    UsageError,
    WorldSpec,
    challenger_panel,
    expected_error,
    miscalibration_penalty,
    sample_id,
    sample_ood,
    verify_proposition,
)


def binned_calibration_z(probs, labels, bins=10):
    """Per-bin z-scores of (observed hit rate - mean confidence) over all (row, class) pairs."""
    k = probs.shape[1]
    p = probs.reshape(-1)
    hit = (labels[:, None] == np.arange(k)[None, :]).reshape(-1).astype(np.float64)
    idx = np.minimum((p * bins).astype(int), bins - 1)
    z = []
    for b in range(bins):
        m = idx == b
        if m.sum() < 100:
            continue
        var = np.sum(p[m] * (1 - p[m]))
        z.append((hit[m].sum() - p[m].sum()) / math.sqrt(var))
    return np.array(z)


@pytest.fixture(scope="module")
def big_id():
    return sample_id(WorldSpec.symmetric(3, 1.5, 1.0, seed=123), 1_000_000)


class TestWorldSpec:
    def test_symmetric_world_is_label_symmetric(self):
        assert WorldSpec.symmetric(4).label_symmetric

    def test_asymmetric_world(self):
        w = WorldSpec([[0, 0], [1, 0], [5, 0]], [[0.0], [1.0], [2.0]])
        assert not w.label_symmetric

    def test_rejects_bad_input(self):
        with pytest.raises(ValidationError):
            WorldSpec([[0.0]], [[0.0]])
        with pytest.raises(ValidationError):
            WorldSpec(np.eye(2), np.eye(3))
        with pytest.raises(ValidationError):
            WorldSpec(np.eye(2), np.eye(2), sigma_std=0.0)
        with pytest.raises(ValidationError):
            WorldSpec(np.eye(2), np.eye(2), seed=-1)

    def test_dict_round_trip(self):
        w = WorldSpec.symmetric(3, 2.0, 1.0, sigma_rob=0.7, seed=9)
        w2 = WorldSpec.from_dict(w.to_dict())
        assert w2.to_dict() == w.to_dict()
        assert WorldSpec.from_dict({"symmetric": {"k": 3, "sep_std": 2.0, "sep_rob": 1.0,
                                                  "sigma_rob": 0.7}, "seed": 9}).to_dict() == w.to_dict()

    def test_missing_field(self):
        with pytest.raises(ValidationError):
            WorldSpec.from_dict({"means_std": [[0.0], [1.0]]})


class TestShiftSpecs:
    @pytest.mark.parametrize("bad", [
        lambda: Suppressed(0.0),
        lambda: Suppressed(-1.0),
        lambda: Anticorrelated(0.0, 1.0),
        lambda: Anticorrelated(1.0, -1.0),
        lambda: Mixture(1.5, MissingSpurious(), Suppressed(1.0)),
        lambda: Mixture(0.5, Mixture(0.5, MissingSpurious(), MissingSpurious()), MissingSpurious()),
    ])
    def test_invalid(self, bad):
        with pytest.raises(ValidationError):
            bad()

    def test_string_forms(self):
        assert str(MissingSpurious()) == "missing"
        assert str(Suppressed(0.5)) == "suppressed:tau=0.5"
        assert str(Anticorrelated(2.0, 0.5)) == "anticorrelated:alpha=2.0,beta=0.5"
        assert str(Mixture(0.5, MissingSpurious(), Suppressed(2.0))) == \
            "mix:w=0.5,a=(missing),b=(suppressed:tau=2.0)"


class TestSampleId:
    def test_label_frequencies(self, big_id):
        n, k = big_id.row_count, 3
        freq = np.bincount(big_id.labels, minlength=k) / n
        sigma = math.sqrt((1 / k) * (1 - 1 / k) / n)
        assert np.all(np.abs(freq - 1 / k) <= 3 * sigma)

    @pytest.mark.parametrize("model", ["std", "rob"])
    def test_binned_calibration(self, big_id, model):
        s = big_id.std_scores if model == "std" else big_id.rob_scores
        z = binned_calibration_z(softmax_rows(s.scores), big_id.labels)
        assert np.all(np.abs(z) <= 3.0), z

    def test_conditional_independence(self):
        ss = sample_id(WorldSpec.symmetric(2, 1.5, 1.0, seed=4), 200_000)
        s, r = ss.std_scores.scores, ss.rob_scores.scores
        for y in range(2):
            m = ss.labels == y
            sigma = 1 / math.sqrt(m.sum())
            for a in range(2):
                for b in range(2):
                    c = np.corrcoef(s[m, a], r[m, b])[0, 1]
                    assert abs(c) <= 3 * sigma

    def test_conditionals_are_id_posterior(self, big_id):
        np.testing.assert_array_equal(
            big_id.exact_conditionals,
            softmax_rows(big_id.std_scores.scores + big_id.rob_scores.scores),
        )
        np.testing.assert_allclose(big_id.exact_conditionals.sum(axis=1), 1.0, atol=1e-12)

    def test_deterministic(self):
        w = WorldSpec.symmetric(3, seed=5)
        a, b = sample_id(w, 1000), sample_id(w, 1000)
        np.testing.assert_array_equal(a.std_scores.scores, b.std_scores.scores)
        np.testing.assert_array_equal(a.rob_scores.scores, b.rob_scores.scores)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_seed_changes_draws(self):
        w = WorldSpec.symmetric(3, seed=5)
        assert not np.array_equal(sample_id(w, 100).labels, sample_id(w, 100, seed=6).labels)

    def test_bad_n(self):
        with pytest.raises(ValidationError):
            sample_id(WorldSpec.symmetric(2), 0)


class TestSampleOod:
    world = WorldSpec.symmetric(3, 2.0, 1.5, seed=8)

    def test_missing_rows_are_zero(self):
        ss = sample_ood(self.world, MissingSpurious(), 500)
        assert np.all(ss.std_scores.scores == 0.0)
        np.testing.assert_array_equal(ss.exact_conditionals, softmax_rows(ss.rob_scores.scores))

    def test_unit_suppression_is_id(self):
        a = sample_id(self.world, 2000)
        b = sample_ood(self.world, Suppressed(1.0), 2000)
        np.testing.assert_array_equal(a.exact_conditionals, b.exact_conditionals)
        np.testing.assert_array_equal(a.std_scores.scores, b.std_scores.scores)

    def test_vanishing_beta_ignores_standard(self):
        ss = sample_ood(self.world, Anticorrelated(1.5, 1e-9), 2000)
        np.testing.assert_allclose(ss.exact_conditionals, softmax_rows(1.5 * ss.rob_scores.scores), atol=1e-8)

    def test_mixture_rows(self):
        ss = sample_ood(self.world, Mixture(0.3, MissingSpurious(), Suppressed(2.0)), 20_000)
        miss, supp = ss.rows_of("missing"), ss.rows_of("suppressed")
        assert np.all(miss | supp)
        assert abs(miss.mean() - 0.3) <= 3 * math.sqrt(0.21 / 20_000)
        assert np.all(ss.std_scores.scores[miss] == 0.0)
        # suppressed rows keep the standard log-posteriors
        np.testing.assert_allclose(np.exp(ss.std_scores.scores[supp]).sum(axis=1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("shift", [Suppressed(0.5), Anticorrelated(1.0, 1.0)])
    def test_class_balance_on_symmetric_world(self, shift):
        n = 200_000
        ss = sample_ood(self.world, shift, n)
        freq = np.bincount(ss.labels, minlength=3) / n
        assert np.all(np.abs(freq - 1 / 3) <= 3 * math.sqrt(2 / 9 / n))

    def test_labels_follow_conditionals(self):
        ss = sample_ood(self.world, Anticorrelated(2.0, 0.5), 200_000)
        z = binned_calibration_z(ss.exact_conditionals, ss.labels)
        assert np.all(np.abs(z) <= 3.0), z

    def test_class_log_shift_flag(self):
        ss = sample_ood(self.world, Suppressed(1.0), 100, class_log_shift=[0.0, 1.0, 2.0])
        assert not ss.label_symmetric
        with pytest.raises(ValidationError):
            sample_ood(self.world, Suppressed(1.0), 100, class_log_shift=[0.0, 1.0])

    def test_unknown_shift(self):
        with pytest.raises(ValidationError):
            sample_ood(self.world, "missing", 10)


class TestExpectedError:
    def test_hand_values(self):
        cond = np.array([[0.7, 0.3], [0.2, 0.8]])
        assert expected_error(cond, np.array([0, 1])) == pytest.approx(0.25)
        assert expected_error(cond, np.array([1, 0])) == pytest.approx(0.75)

    def test_panel_contains_members(self, rng):
        s, r = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
        panel = challenger_panel(s, r)
        np.testing.assert_array_equal(panel["logits_alpha=1.0"], predict(s))
        np.testing.assert_array_equal(panel["probs_alpha=0.0"], predict(r))
        assert {"max_confidence", "min_confidence", "random_mixer"} <= panel.keys()


class TestVerify:
    def test_prop1(self):
        rep = verify_proposition(sample_id(WorldSpec.symmetric(2, seed=1), 20_000), 1)
        assert rep.passed
        assert rep.evidence["min_challenger_margin"] >= 0.0

    def test_prop2_missing_only(self):
        rep = verify_proposition(sample_ood(WorldSpec.symmetric(3, seed=2), MissingSpurious(), 5000), 2)
        assert rep.passed and rep.checks["missing_rows_ens_equals_rob"]

    def test_prop2_asymmetric_world_notes_restriction(self):
        w = WorldSpec([[0, 0], [1, 0], [5, 0]], [[0.0], [1.0], [2.0]], seed=3)
        rep = verify_proposition(sample_ood(w, Suppressed(2.0), 5000), 2)
        assert rep.passed
        assert "expected_error_ens_le_std" not in rep.checks
        assert rep.notes

    def test_prop3(self):
        rep = verify_proposition(sample_ood(WorldSpec.symmetric(3, seed=2), Anticorrelated(1.0, 1.0), 20_000), 3)
        assert rep.passed
        e = rep.evidence["expected_error"]
        assert e["rob"] <= e["ens"] <= e["std"]

    @pytest.mark.parametrize("which,ss", [
        (1, lambda: sample_ood(WorldSpec.symmetric(2), MissingSpurious(), 10)),
        (2, lambda: sample_ood(WorldSpec.symmetric(2), Anticorrelated(1.0, 1.0), 10)),
        (3, lambda: sample_id(WorldSpec.symmetric(2), 10)),
        (4, lambda: sample_id(WorldSpec.symmetric(2), 10)),
    ])
    def test_wrong_variant(self, which, ss):
        with pytest.raises(UsageError):
            verify_proposition(ss(), which)

    def test_report_dict(self):
        rep = verify_proposition(sample_id(WorldSpec.symmetric(2, seed=1), 100), 1)
        d = rep.to_dict()
        assert d["verdict"] == "PASS"
        assert d["first_violation"] is None


def test_miscalibration_penalty_margin():
    out = miscalibration_penalty(WorldSpec.symmetric(3, 2.0, 1.5, seed=3), Suppressed(1.0),
                                 10.0, n_val=20_000, n_test=50_000)
    assert out["logits_error"] - out["calibrated_logits_error"] > 0
