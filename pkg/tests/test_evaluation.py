
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from disease_atlas.data import SyntheticConfig, generate_synthetic
from disease_atlas.data.windows import EXCLUDED, EncodedRecord, make_labels, make_windows
from disease_atlas.evaluation import (MODELS, BenchmarkSettings, MetricError, MetricReport, auprc, auroc,
                                      benchmark, fit_logistic, fmt_cell, fmt_pct, forecast_comparator,
                                      landmarking_baseline, longitudinal_mse, lstm_baseline,
                                      pct_decrease, score_labels, summary_text, train_lstm_baseline,
                                      write_report)
from disease_atlas.model import ModelConfig
from disease_atlas.pipeline import TrainConfig

from oracles import pairwise_auroc, rank_walk_auprc


def toy_records(n, seed=0, steps=8):
    """A precursor marker flips to +1 exactly one step before each event."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        times = np.arange(steps) * 0.5
        marker = -np.ones((steps, 1))
        events = np.zeros((steps, 1))
        last = steps - 1
        if rng.random() < 0.4:
            last = int(rng.integers(2, steps))
            events[last] = 1
            marker[last - 1] = 1.0
        inputs = np.hstack([np.zeros((steps, 1)), marker])
        out.append(EncodedRecord(f"p{i}", times, inputs, marker.copy(), np.ones((steps, 1), bool),
                                 np.zeros((steps, 0)), np.zeros((steps, 0), bool), events, times[last], last))
    return out


class TestAUROC:
    def test_examples(self):
        assert auroc([0.9, 0.1], [1, 0]) == 1.0
        assert auroc([0.3] * 5, [1, 0, 1, 0, 0]) == 0.5
        assert auroc([0.8, 0.6, 0.4], [1, 0, 1]) == 0.5

    def test_single_class(self):
        with pytest.raises(MetricError):
            auroc([0.1, 0.2], [1, 1])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 300))
    def test_matches_pairwise_oracle_with_ties(self, seed, n):
        rng = np.random.default_rng(seed)
        s = rng.integers(0, 6, n) / 5.0
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        assert abs(auroc(s, y) - pairwise_auroc(s, y)) <= 1e-12

    def test_oracle_at_thousand_points(self):
        rng = np.random.default_rng(1)
        s, y = np.round(rng.normal(size=1000), 1), (rng.random(1000) < 0.3).astype(int)
        assert abs(auroc(s, y) - pairwise_auroc(s, y)) <= 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_monotone_invariance(self, seed):
        rng = np.random.default_rng(seed)
        s, y = rng.normal(size=50), rng.integers(0, 2, 50)
        y[:2] = (0, 1)
        assert auroc(s, y) == auroc(np.exp(s), y)


class TestAUPRC:
    def test_examples(self):
        assert auprc(np.linspace(1, 0, 10), [1] + [0] * 9) == 1.0
        assert auprc([0.9, 0.1], [0, 1]) == 0.5
        assert auprc([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx((1 + 2 / 3) / 2, abs=1e-15)

    def test_no_positives(self):
        with pytest.raises(MetricError):
            auprc([0.1, 0.2], [0, 0])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 200))
    def test_matches_rank_walk(self, seed, n):
        rng = np.random.default_rng(seed)
        s = rng.integers(0, 4, n) / 3.0
        y = rng.integers(0, 2, n)
        y[0] = 1
        assert abs(auprc(s, y) - rank_walk_auprc(list(s), list(y))) <= 1e-12

    @pytest.mark.parametrize("n_pos,n", [(1, 5), (3, 10), (7, 7)])
    def test_perfect_and_worst(self, n_pos, n):
        y = np.array([1] * n_pos + [0] * (n - n_pos))
        score = np.arange(n, 0, -1, dtype=float)
        assert auprc(score, y) == 1.0
        worst = np.mean([(i + 1) / (n - n_pos + i + 1) for i in range(n_pos)])
        assert auprc(-score, y) == pytest.approx(worst, abs=1e-15)

    def test_ties_follow_input_order(self):
        assert auprc([0.5, 0.5], [1, 0]) == 1.0
        assert auprc([0.5, 0.5], [0, 1]) == 0.5


class TestExcluded:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_excluded_rows_leave_metrics_unchanged(self, seed):
        rng = np.random.default_rng(seed)
        s, y = rng.normal(size=40), rng.integers(0, 2, 40)
        y[:2] = (0, 1)
        base = (auroc(*score_labels(s, y)), auprc(*score_labels(s, y)))
        pos = rng.integers(0, 41, 10)
        s2 = np.insert(s, pos, rng.normal(size=10))
        y2 = np.insert(y, pos, EXCLUDED)
        assert (auroc(*score_labels(s2, y2)), auprc(*score_labels(s2, y2))) == base


class TestMSE:
    def test_perfect_prediction(self):
        y = np.arange(6.0).reshape(3, 2)
        out = longitudinal_mse(y, y, np.ones_like(y, bool), np.full(3, 0.5), ["a", "b"], (0.5,))
        assert out == {("a", 0.5): 0.0, ("b", 0.5): 0.0}

    def test_constant_predictor_gives_population_variance(self):
        rng = np.random.default_rng(0)
        y = rng.normal(2.0, 3.0, (500, 1))
        out = longitudinal_mse(np.full_like(y, y.mean()), y, np.ones_like(y, bool), np.full(500, 1.0),
                               ["a"], (1.0,))
        assert out[("a", 1.0)] == pytest.approx(y.var(), rel=1e-12)

    def test_only_observed_targets_count(self):
        rng = np.random.default_rng(1)
        pred, y = rng.normal(size=(40, 2)), rng.normal(size=(40, 2))
        obs = rng.random((40, 2)) < 0.5
        tau = np.repeat([0.5, 1.0], 20)
        a = longitudinal_mse(pred, y, obs, tau, ["a", "b"], (0.5, 1.0))
        y2 = np.where(obs, y, 1e9)
        assert longitudinal_mse(pred, y2, obs, tau, ["a", "b"], (0.5, 1.0)) == a

    def test_empty_cell_is_absent(self):
        out = longitudinal_mse(np.zeros((2, 1)), np.zeros((2, 1)), np.zeros((2, 1), bool), np.full(2, 0.5),
                               ["a"], (0.5, 1.0))
        assert out[("a", 0.5)] is None and out[("a", 1.0)] is None

    def test_pct_decrease(self):
        assert pct_decrease(1.0, 2.0) == 50.0

    @settings(max_examples=80, deadline=None)
    @given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_antisymmetry_identity(self, a, b):
        # 100(b-a)/b = -[100(a-b)/a] * a/b
        lhs, rhs = pct_decrease(a, b), -pct_decrease(b, a) * a / b
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


class TestLandmarking:
    def test_recovers_generating_coefficients(self):
        rng = np.random.default_rng(0)
        n = 10_000
        X = rng.normal(size=(n, 2)) * [1.0, 2.0] + [0.5, -1.0]
        beta, b0 = np.array([1.2, -0.7]), 0.3
        y = rng.random(n) < 1 / (1 + np.exp(-(X @ beta + b0)))
        fit = fit_logistic(X, y, iterations=3000)
        np.testing.assert_allclose(fit.coef, beta, atol=0.1)
        assert fit.intercept == pytest.approx(b0, abs=0.1)

    def test_separating_feature(self):
        x = np.linspace(-1, 1, 40)[:, None]
        y = (x[:, 0] > 0).astype(int)
        assert auroc(fit_logistic(x, y, 300).predict(x), y) == 1.0

    def test_constant_feature_dropped_with_warning(self):
        rng = np.random.default_rng(2)
        X = np.hstack([rng.normal(size=(50, 1)), np.ones((50, 1))])
        with pytest.warns(RuntimeWarning, match="constant"):
            fit = fit_logistic(X, rng.integers(0, 2, 50), 50)
        assert np.isnan(fit.coef[1]) and not fit.kept[1]

    def test_pooled_fit_is_deterministic(self):
        recs = toy_records(40)
        lab = make_labels(recs)
        a = landmarking_baseline(lab, lab, 200, seed=1)
        assert a.tobytes() == landmarking_baseline(lab, lab, 200, seed=1).tobytes()
        assert a.shape == (len(lab), 4)


class TestLSTMBaseline:
    def test_one_output_per_horizon(self):
        lab = make_labels(toy_records(20))
        model = train_lstm_baseline(lab, TrainConfig(8, 3, dropout_rate=0.0), ModelConfig(1, 0, 1, 1, 4, 2))
        assert model.params["out_W"].shape[0] == 4 == len(model.horizons)

    def test_deterministic_without_dropout(self):
        lab = make_labels(toy_records(20))
        cfg = TrainConfig(8, 10, dropout_rate=0.0, seed=5)
        a = lstm_baseline(lab, lab, cfg, ModelConfig(1, 0, 1, 1, 4, 2))
        assert a.tobytes() == lstm_baseline(lab, lab, cfg, ModelConfig(1, 0, 1, 1, 4, 2)).tobytes()

    def test_separable_toy_cohort(self):
        train_lab, test_lab = make_labels(toy_records(150, 1)), make_labels(toy_records(80, 2))
        scores = lstm_baseline(train_lab, test_lab, TrainConfig(32, 400, 1e-2, dropout_rate=0.0),
                               ModelConfig(1, 0, 1, 1, 8, 2))
        assert auroc(*score_labels(scores[:, 0], test_lab.labels[:, 0])) >= 0.95


class TestReport:
    def test_formats(self):
        assert fmt_cell(0.9541, 0.0082) == "0.954 (± 0.008)"
        assert fmt_pct(10.2, 3.4) == "10% (±3%)"

    def test_identical_runs_have_zero_sd(self):
        assert MetricReport.summarize([0.8, 0.8, 0.8]) == (0.8, 0.0)
        assert MetricReport.summarize([None, None]) is None

    @pytest.fixture(scope="class")
    def tiny(self):
        cohort = generate_synthetic(SyntheticConfig(num_patients=80, seed=4))
        st_ = BenchmarkSettings(TrainConfig(16, 6, 1e-2), model_hidden=4, model_task=3, lstm_iterations=4,
                                landmark_iterations=30, mc_samples=2)
        return cohort, st_, benchmark(cohort, st_)

    def test_layout(self, tiny, tmp_path):
        cohort, _, report = tiny
        assert len(report.discrimination) == 3 * 4 * 2
        assert all(len(v) == 3 for v in report.discrimination.values())
        assert not report.failures
        for v in report.discrimination.values():
            assert all(0.0 <= x <= 1.0 for x in v)
        assert len(report.pct_decrease) == len(cohort.spec.continuous) * 4
        assert {m for _, _, m in report.discrimination} == set(MODELS)
        files = write_report(report, tmp_path)
        header = files[0].read_text().splitlines()[0]
        assert header == "metric,tau,model,mean,sd,partitions,status"
        assert files[1].read_text().splitlines()[0] == "channel,tau,pct_decrease_mean,pct_decrease_sd,partitions"
        assert "(± " in summary_text(report)

    def test_failures_are_marked_not_raised(self, tiny):
        cohort, st_, _ = tiny

        def broken(*_):
            raise RuntimeError("boom")

        report = benchmark(cohort, st_, models=("landmarking",), external={"jm": broken})
        assert len(report.failures) == 3 and "boom" in report.failures[0]
        assert all(v == [None] * 3 for k, v in report.discrimination.items() if k[2] == "jm")
        assert "failed" in summary_text(report)
        assert report.any_success

    def test_forecast_comparator(self, tiny):
        cohort, st_, _ = tiny
        from disease_atlas.data import encode, prepare
        prep = prepare(cohort)
        recs = encode(prep.test, prep.stats)
        lab, win = make_labels(recs), make_windows(recs)
        rows = []
        for p, k in zip(lab.patient, lab.end):
            rec = recs[p]
            for tau in lab.horizons:
                rows.append({"patient_id": rec.patient_id, "t": float(rec.times[k]), "tau": tau, "channel": "AD",
                             "mean": 0.0, "risk": float(rec.inputs[k, 3])})
        fn = forecast_comparator(rows, cohort.spec)
        scores, cont = fn(lab, win, 0, prep.stats)
        assert cont is None
        np.testing.assert_array_equal(scores[:, 1], [recs[p].inputs[k, 3] for p, k in zip(lab.patient, lab.end)])
        with pytest.raises(MetricError):
            forecast_comparator(rows[:-8], cohort.spec)(lab, win, 0, prep.stats)
