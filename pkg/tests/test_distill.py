import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headcount import distill as D
from headcount import tensor as T
from headcount.tensor import Tensor

ONE_HOT_6 = np.array([1.0, 0, 0, 0, 0, 0])
HALF_HALF_6 = np.array([0.5, 0.5, 0, 0, 0, 0])


class TestSampleUncertainty:
    def test_one_hot_uniform_prior(self):
        # mean squared deviation 5/36 -> -ln(5/36)
        assert D.sample_uncertainty(ONE_HOT_6) == pytest.approx(1.9741, abs=1e-3)
        assert D.sample_uncertainty(ONE_HOT_6) == pytest.approx(math.log(36 / 5), abs=1e-9)

    def test_half_half(self):
        # mean squared deviation 1/18 -> ln 18
        assert D.sample_uncertainty(HALF_HALF_6) == pytest.approx(2.8904, abs=1e-3)

    def test_exact_prior_clamps(self):
        val = D.sample_uncertainty(np.full(6, 1 / 6))
        assert val == pytest.approx(27.631, abs=1e-3)
        assert val == pytest.approx(D.MAX_SCORE, abs=1e-9)

    def test_non_normalized_rejected(self):
        with pytest.raises(ValueError, match="not a probability"):
            D.sample_uncertainty(np.array([0.9, 0.6, 0, 0, 0, 0]))

    def test_custom_prior(self):
        prior = np.array([0.5, 0.5])
        assert D.sample_uncertainty(np.array([0.5, 0.5]), prior) == pytest.approx(
            D.MAX_SCORE, abs=1e-9)

    @given(st.lists(st.floats(0.01, 1.0), min_size=6, max_size=6),
           st.lists(st.floats(0.01, 1.0), min_size=6, max_size=6))
    @settings(max_examples=50, deadline=None)
    def test_strictly_decreasing_in_deviation(self, raw_a, raw_b):
        a = np.array(raw_a) / np.sum(raw_a)
        b = np.array(raw_b) / np.sum(raw_b)
        prior = np.full(6, 1 / 6)
        msd_a = np.mean((a - prior) ** 2)
        msd_b = np.mean((b - prior) ** 2)
        sa, sb = D.sample_uncertainty(a), D.sample_uncertainty(b)
        if msd_a > msd_b * (1 + 1e-9):
            assert sa < sb
        elif msd_b > msd_a * (1 + 1e-9):
            assert sb < sa

    def test_bounds_for_six_classes(self):
        rng = np.random.default_rng(0)
        lo = -math.log(5 / 36)  # one-hot extreme has the largest deviation
        for _ in range(200):
            y = rng.dirichlet(rng.uniform(0.2, 3.0, 6))
            s = D.sample_uncertainty(y)
            assert lo - 1e-9 <= s <= D.MAX_SCORE + 1e-9


class TestBatchUncertainty:
    def test_mean_of_examples(self):
        assert D.batch_uncertainty([1.9741, 2.8904]) == pytest.approx(2.4322, abs=1e-3)

    def test_single_sample(self):
        assert D.batch_uncertainty([3.7]) == 3.7

    def test_all_equal(self):
        assert D.batch_uncertainty([2.2, 2.2, 2.2]) == pytest.approx(2.2)

    def test_empty_errors(self):
        with pytest.raises(ValueError, match="empty"):
            D.batch_uncertainty([])

    def test_score_batch_consistency(self):
        rng = np.random.default_rng(1)
        probs = rng.dirichlet(np.ones(6), size=8)
        score = D.score_batch(probs)
        assert score.s_batch == pytest.approx(np.mean(score.s_sample))
        assert score.n == 6
        singles = [D.sample_uncertainty(p) for p in probs]
        np.testing.assert_allclose(score.s_sample, singles)


class TestGate:
    def test_example_threshold(self):
        assert D.gate_decision(2.4322, 2.0) is True

    def test_plus_infinity_never_queries(self):
        assert D.gate_decision(D.MAX_SCORE, float("inf")) is False

    def test_minus_infinity_always_queries(self):
        assert D.gate_decision(0.0, float("-inf")) is True


class TestKdLoss:
    def test_teacher_equals_student(self):
        logits = Tensor(np.array([1.0, -2.0, 0.5, 0.0, 0.0, 3.0]))
        cfg = D.KdConfig(tau=0.0, temperature=2.0, alpha=0.3)
        loss = D.kd_loss(logits, logits.data.copy(), 5, cfg)
        ce = T.softmax_cross_entropy(Tensor(logits.data), 5).item()
        assert loss.item() == pytest.approx((1 - 0.3) * ce, abs=1e-6)

    def test_alpha_zero_is_plain_ce(self):
        rng = np.random.default_rng(2)
        student = Tensor(rng.normal(size=(4, 6)))
        teacher = rng.normal(size=(4, 6))
        labels = np.array([0, 1, 5, 2])
        cfg = D.KdConfig(tau=0.0, temperature=4.0, alpha=0.0)
        loss = D.kd_loss(student, teacher, labels, cfg)
        ce = T.softmax_cross_entropy(Tensor(student.data), labels).item()
        assert loss.item() == pytest.approx(ce, abs=1e-6)

    def test_alpha_one_certain_teacher_two_class(self):
        # teacher nearly one-hot on the true class, T=1: loss ~ -log s0
        student = Tensor(np.array([0.0, 0.0]))
        teacher = np.array([30.0, 0.0])
        cfg = D.KdConfig(tau=0.0, temperature=1.0, alpha=1.0)
        loss = D.kd_loss(student, teacher, 0, cfg)
        assert loss.item() == pytest.approx(math.log(2), abs=1e-3)

    def test_shape_mismatch(self):
        cfg = D.KdConfig(tau=0.0)
        with pytest.raises(ValueError, match="does not match"):
            D.kd_loss(Tensor(np.zeros(6)), np.zeros(5), 0, cfg)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        student = T.parameter(rng.normal(size=(3, 6)), "student", dtype=np.float64)
        teacher = rng.normal(size=(3, 6))
        labels = np.array([1, 0, 4])
        cfg = D.KdConfig(tau=0.0, temperature=3.0, alpha=0.6)

        def build():
            return D.kd_loss(student, teacher, labels, cfg)

        assert T.check_gradients(build, [student]) < 1e-4

    def test_loss_non_negative(self):
        rng = np.random.default_rng(4)
        cfg = D.KdConfig(tau=0.0, temperature=4.0, alpha=0.5)
        for _ in range(20):
            student = Tensor(rng.normal(size=(2, 6)))
            teacher = rng.normal(size=(2, 6))
            labels = rng.integers(0, 6, size=2)
            assert D.kd_loss(student, teacher, labels, cfg).item() >= -1e-9

    def test_bad_hyperparameters(self):
        with pytest.raises(ValueError, match="temperature"):
            D.KdConfig(tau=0.0, temperature=0.0)
        with pytest.raises(ValueError, match="alpha"):
            D.KdConfig(tau=0.0, alpha=1.5)


class _CountingModel:
    def __init__(self):
        self.calls = 0

    def forward_array(self, x):
        self.calls += 1
        return np.zeros((x.shape[0], 6), dtype=np.float32)


class TestTeacherHandle:
    def test_one_query_per_batch(self):
        handle = D.TeacherHandle(_CountingModel())
        x = np.zeros((4, 1, 32), dtype=np.float32)
        handle.query(x)
        handle.query(x)
        assert handle.queries == 2
        assert handle._model.calls == 2


class TestLedger:
    def make_ledger(self, scores, tau):
        ledger = D.QueryLedger()
        for s in scores:
            ledger.record(s, D.gate_decision(s, tau), 0.1)
        return ledger

    def test_ratios(self):
        ledger = self.make_ledger([1.0, 3.0, 2.0, 4.0], tau=2.5)
        assert ledger.total_batches == 4
        assert ledger.queried_batches == 2
        assert ledger.query_ratio == 0.5

    def test_extreme_thresholds(self):
        scores = [1.0, 5.0, 27.0]
        assert self.make_ledger(scores, float("inf")).query_ratio == 0.0
        assert self.make_ledger(scores, float("-inf")).query_ratio == 1.0

    def test_replay_monotone_in_tau(self):
        rng = np.random.default_rng(5)
        scores = rng.uniform(0.0, 28.0, size=200)
        taus = sorted(rng.uniform(-1.0, 29.0, size=20))
        ratios = [D.replay_query_ratio(scores, t) for t in taus]
        assert all(a >= b for a, b in zip(ratios, ratios[1:]))

    def test_replay_subset_property(self):
        rng = np.random.default_rng(6)
        scores = list(rng.uniform(0.0, 28.0, size=50))
        t1, t2 = 5.0, 9.0
        q1 = {i for i, s in enumerate(scores) if D.gate_decision(s, t1)}
        q2 = {i for i, s in enumerate(scores) if D.gate_decision(s, t2)}
        assert q2 <= q1

    def test_report_against_reference(self):
        ledger = self.make_ledger([3.0, 1.0, 3.0, 1.0], tau=2.0)
        rep = D.ledger_report(ledger, reference_seconds=0.2)
        assert rep.query_ratio == 0.5
        assert rep.wall_clock_ratio == pytest.approx(ledger.total_seconds / 0.2)
        text = D.format_ledger_report(rep)
        assert "query ratio" in text and "0.5000" in text

    def test_report_estimates_reference_from_ungated_steps(self):
        ledger = D.QueryLedger()
        ledger.record(3.0, True, 0.5)
        ledger.record(1.0, False, 0.1)
        rep = D.ledger_report(ledger)
        assert rep.reference_seconds == pytest.approx(0.2)
        assert rep.wall_clock_ratio == pytest.approx(0.6 / 0.2)

    def test_empty_ledger_errors(self):
        with pytest.raises(ValueError, match="empty"):
            D.ledger_report(D.QueryLedger())
