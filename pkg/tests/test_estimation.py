"""
Tests for likelihood evaluation, BFGS fitting and the sliding-window fit.
"""
import math

import numpy as np
import pytest

from app.services import estimation
from app.services.errors import DataError, NumericalError
from app.services.estimation import (
    STACKED_ESTIMATE_COLUMNS,
    WARM_START_MARGIN,
    FitConfig,
    WindowEstimates,
    WindowFit,
    default_start,
    estimate_rows,
    fit_mle,
    log_likelihood,
    sliding_window_fit,
    sliding_window_fit_all,
    stacked_estimate_rows,
)
from app.services.kalman import DiffuseInit, filter_pass
from app.services.prediction import constant_velocity_baseline, rmse
from app.services.state_space import (
    ParamVector,
    build_single,
    decode_entities,
    decode_params,
    encode_params,
    model_from_params,
)
from app.services.synthetic import conditioning_oracle, simulate
from app.services.trajectory_data import TrackingSeries, sliding_windows


MEAN = np.array([1.0, 2.0, 0.0, 0.0])


def _series(model, n, seed, init_state=None):
    scenario = simulate(model, n, seed=seed, init_state=init_state)
    return TrackingSeries(entity_id=1, samples=scenario.observations, dt=model.dt)


class TestLogLikelihood:
    """One observation from a proper prior with zero covariance: F = Sigma."""

    def _loglik(self, sigma, obs):
        model = build_single(0.1, np.eye(2), sigma)
        init = DiffuseInit.proper(MEAN, np.zeros((4, 4)))
        return log_likelihood(model, np.array([obs]), init)

    def test_observation_at_mean(self):
        assert self._loglik((1.0, 1.0), [1.0, 2.0]) == pytest.approx(-math.log(2 * math.pi), abs=1e-6)
        assert self._loglik((1.0, 1.0), [1.0, 2.0]) == pytest.approx(-1.837877, abs=1e-6)

    def test_unit_innovation(self):
        assert self._loglik((1.0, 1.0), [2.0, 2.0]) == pytest.approx(-2.337877, abs=1e-6)

    def test_doubled_variance(self):
        s = math.sqrt(2.0)
        assert self._loglik((s, s), [1.0, 2.0]) == pytest.approx(-2.531024, abs=1e-6)

    def test_matches_oracle_density(self, random_unit_model):
        rng = np.random.default_rng(9)
        model = random_unit_model(rng)
        mean, cov = rng.normal(size=4), np.eye(4)
        observations = simulate(model, 8, seed=9, init_state=mean).observations

        ours = log_likelihood(model, observations, DiffuseInit.proper(mean, cov))
        oracle = conditioning_oracle(model, observations, (mean, cov)).log_density
        assert ours == pytest.approx(oracle, abs=1e-6)

    def test_missing_samples_route_through_filter(self, pitch_model):
        observations = simulate(pitch_model, 30, seed=2).observations
        observations[12] = np.nan
        assert log_likelihood(pitch_model, observations) == filter_pass(pitch_model, observations).loglik


class TestFitMle:
    def test_short_window_rejected(self, pitch_model):
        points = simulate(pitch_model, 4, seed=0).observations
        with pytest.raises(DataError, match="at least 5"):
            fit_mle(points)

    def test_gaps_rejected(self, pitch_model):
        points = simulate(pitch_model, 12, seed=0).observations
        points[6] = np.nan
        with pytest.raises(DataError):
            fit_mle(points)

    def test_multi_entity_window_rejected(self):
        with pytest.raises(DataError):
            fit_mle(np.zeros((10, 4)))

    def test_never_worse_than_start(self, pitch_model, center_state):
        points = simulate(pitch_model, 200, seed=1, init_state=center_state).observations
        start = default_start()

        result = fit_mle(points)

        start_loglik = log_likelihood(model_from_params(0.1, start), points)
        assert result.loglik >= start_loglik
        assert result.loglik == pytest.approx(log_likelihood(result.model(0.1), points), rel=1e-9)

    def test_start_at_truth_does_not_worsen(self, pitch_model, center_state):
        points = simulate(pitch_model, 200, seed=4, init_state=center_state).observations
        truth = encode_params(pitch_model.Q, pitch_model.sigma)

        result = fit_mle(points, start=truth)

        assert result.loglik >= log_likelihood(pitch_model, points) - 1e-6
        assert result.gradient_norm < 1e-2

    def test_raw_mode_fit(self, pitch_model, center_state):
        points = simulate(pitch_model, 100, seed=5, init_state=center_state).observations
        result = fit_mle(points, config=FitConfig(mode="raw"))
        assert result.params.mode == "raw"
        assert result.loglik >= log_likelihood(model_from_params(0.1, default_start("raw")), points)

    def test_unusable_start_raises(self, pitch_model):
        points = simulate(pitch_model, 20, seed=0).observations
        # log sigma = 800 overflows to an infinite measurement noise
        start = ParamVector(values=[800.0, 800.0, 0.0, 0.0, 0.0, 0.0])
        with pytest.raises(NumericalError, match="optimizer"):
            fit_mle(points, start=start)

    @pytest.mark.slow
    def test_recovers_parameters(self, pitch_model, center_state):
        points = simulate(pitch_model, 2000, seed=7, init_state=center_state).observations
        q, sigma = decode_params(fit_mle(points).params)
        np.testing.assert_allclose(np.diag(q), [400.0, 400.0], rtol=0.25)
        np.testing.assert_allclose(sigma, [10.0, 10.0], rtol=0.15)

    @pytest.mark.slow
    def test_zero_acceleration_variance(self, center_state):
        model = build_single(0.1, np.zeros((2, 2)), (10.0, 10.0))
        points = simulate(model, 2000, seed=7, init_state=center_state).observations
        q, sigma = decode_params(fit_mle(points).params)
        assert np.diag(q).max() <= 1.0
        np.testing.assert_allclose(sigma, [10.0, 10.0], rtol=0.05)

    @pytest.mark.slow
    def test_scale_consistency(self, pitch_model, center_state):
        points = simulate(pitch_model, 300, seed=12, init_state=center_state).observations
        start_cm = encode_params(pitch_model.Q, pitch_model.sigma)
        start_m = encode_params(pitch_model.Q / 1e4, pitch_model.sigma / 100.0)

        _, sigma_cm = decode_params(fit_mle(points, start=start_cm).params)
        _, sigma_m = decode_params(fit_mle(points / 100.0, start=start_m).params)

        np.testing.assert_allclose(sigma_m, sigma_cm / 100.0, rtol=1e-2)


class TestSlidingWindow:
    def test_eleven_samples_give_one_window(self, pitch_model, center_state):
        series = _series(pitch_model, 11, seed=0, init_state=center_state)

        estimates = sliding_window_fit(series, 10)

        assert len(estimates) == 1
        window = estimates.windows[0]
        assert window.window_start == 0
        assert window.target_index == 10
        np.testing.assert_array_equal(window.target, series.samples[10])
        assert window.filtered_means.shape == (10, 4)

    def test_window_count_and_order(self, pitch_model, center_state):
        series = _series(pitch_model, 16, seed=1, init_state=center_state)

        estimates = sliding_window_fit(series, 10)

        assert len(estimates) == 6
        assert estimates.window_starts.tolist() == [0, 1, 2, 3, 4, 5]
        assert estimates.predictions.shape == (6, 2)
        assert len(estimate_rows(estimates)) == 6

    def test_prediction_is_filter_forecast(self, pitch_model, center_state):
        series = _series(pitch_model, 11, seed=2, init_state=center_state)
        window = sliding_window_fit(series, 10).windows[0]

        rerun = filter_pass(window.fit.model(0.1), series.samples[:10])
        np.testing.assert_allclose(window.predicted_mean, rerun.predicted[-1].Z)

    def test_gap_splits_windows(self, pitch_model, center_state):
        samples = simulate(pitch_model, 25, seed=3, init_state=center_state).observations
        samples[12] = np.nan
        series = TrackingSeries(entity_id=1, samples=samples)

        estimates = sliding_window_fit(series, 10)

        # stretches [0, 12) and [13, 25) hold one and one window of 11 samples
        assert estimates.window_starts.tolist() == [0, 1, 13, 14]

    def test_failed_window_is_flagged_and_run_continues(self, monkeypatch, pitch_model, center_state):
        series = _series(pitch_model, 13, seed=4, init_state=center_state)
        real_fit = estimation.fit_mle

        def flaky(points, dt, start=None, config=None):
            if np.array_equal(points, series.samples[1:11]):
                raise NumericalError("singular", module="kalman", step=3)
            return real_fit(points, dt, start=start, config=config)

        monkeypatch.setattr(estimation, "fit_mle", flaky)
        estimates = sliding_window_fit(series, 10)

        assert [w.failed for w in estimates.windows] == [False, True, False]
        assert estimates.n_failed == 1
        assert "kalman, step 3" in estimates.windows[1].message
        assert np.isnan(estimates.windows[1].predicted_mean).all()
        assert np.isfinite(estimates.prediction_rmse)

    def test_too_short_series_rejected(self, pitch_model):
        with pytest.raises(DataError):
            sliding_window_fit(_series(pitch_model, 10, seed=0), 10)

    def test_window_below_minimum_rejected(self, pitch_model):
        with pytest.raises(DataError):
            sliding_window_fit(_series(pitch_model, 30, seed=0), 4)

    def test_warm_start_needs_local_executor(self, pitch_model):
        with pytest.raises(DataError):
            sliding_window_fit(_series(pitch_model, 30, seed=0), 10, warm_start=True, executor="celery")

    def test_window_starts_must_increase(self):
        fit = WindowFit(
            window_start=3, fit=None, filtered_means=np.zeros((10, 4)), filtered_covs=np.zeros((10, 4, 4)),
            predicted_mean=np.zeros(4), predicted_cov=np.zeros((4, 4)), target=np.zeros(2),
        )
        with pytest.raises(DataError):
            WindowEstimates(entity_id=1, window_len=10, dt=0.1, windows=[fit, fit])

    def test_window_fit_dict_round_trip(self, pitch_model, center_state):
        series = _series(pitch_model, 11, seed=6, init_state=center_state)
        window = sliding_window_fit(series, 10).windows[0]

        restored = WindowFit.from_dict(window.to_dict())

        assert restored.window_start == window.window_start
        assert restored.fit.loglik == window.fit.loglik
        np.testing.assert_array_equal(restored.fit.params.values, window.fit.params.values)
        np.testing.assert_array_equal(restored.filtered_covs, window.filtered_covs)

    def _assert_warm_matches_cold(self, warm, cold):
        assert warm.window_starts.tolist() == cold.window_starts.tolist()
        for w, c in zip(warm.windows, cold.windows):
            assert w.fit.loglik >= c.fit.loglik
            if w.fit.loglik <= c.fit.loglik + WARM_START_MARGIN:
                np.testing.assert_allclose(w.predicted_mean[:2], c.predicted_mean[:2], atol=1e-3)

    def test_warm_start_never_worse_than_cold_start(self, pitch_model, center_state):
        series = _series(pitch_model, 13, seed=8, init_state=center_state)

        cold = sliding_window_fit(series, 10)
        warm = sliding_window_fit(series, 10, warm_start=True)

        self._assert_warm_matches_cold(warm, cold)
        # the first window has no previous optimum and is fitted cold
        np.testing.assert_array_equal(warm.windows[0].predicted_mean, cold.windows[0].predicted_mean)

    @pytest.mark.slow
    def test_warm_start_agrees_with_cold_start(self, pitch_model, center_state):
        series = _series(pitch_model, 60, seed=8, init_state=center_state)

        cold = sliding_window_fit(series, 10)
        warm = sliding_window_fit(series, 10, warm_start=True)

        self._assert_warm_matches_cold(warm, cold)

    @pytest.mark.slow
    def test_beats_constant_velocity_baseline(self, pitch_model, center_state):
        series = _series(pitch_model, 2500, seed=7, init_state=center_state)
        assert len(sliding_windows(series, 11)) == 2490

        head = TrackingSeries(entity_id=1, samples=series.samples[:110], dt=series.dt)
        estimates = sliding_window_fit(head, 10)

        assert len(estimates) == 100
        baseline = constant_velocity_baseline(head.samples)[10:]
        assert estimates.prediction_rmse <= rmse(baseline, head.samples[10:])


class TestStackedSlidingWindow:
    def _pair(self, model, n, center_state, missing=()):
        first = simulate(model, n, seed=11, init_state=center_state).observations
        second = simulate(model, n, seed=12, init_state=-center_state).observations
        second[list(missing)] = np.nan
        return [TrackingSeries(entity_id=3, samples=first), TrackingSeries(entity_id=9, samples=second)]

    def test_matches_entity_by_entity_fits(self, pitch_model, center_state):
        series = self._pair(pitch_model, 8, center_state)

        stacked = sliding_window_fit_all(series, 5)

        assert stacked.entity_ids == (3, 9)
        assert stacked.window_starts.tolist() == [0, 1, 2]
        assert stacked.predictions.shape == (3, 2, 2)
        for k, s in enumerate(series):
            single = sliding_window_fit(s, 5)
            np.testing.assert_allclose(stacked.predictions[:, k], single.predictions, atol=1e-4)
            for w, c in zip(stacked.windows, single.windows):
                q, sigma = decode_entities(w.params)[k]
                q_single, sigma_single = decode_params(c.fit.params)
                np.testing.assert_allclose(q, q_single)
                np.testing.assert_allclose(sigma, sigma_single)

    def test_loglik_is_sum_over_entities(self, pitch_model, center_state):
        window = sliding_window_fit_all(self._pair(pitch_model, 6, center_state), 5).windows[0]
        assert window.loglik == pytest.approx(sum(f.loglik for f in window.entity_fits), rel=1e-6)
        assert window.model(0.1).state_dim == 8

    def test_gap_in_one_entity_skips_windows(self, pitch_model, center_state):
        stacked = sliding_window_fit_all(self._pair(pitch_model, 14, center_state, missing=[4]), 5)
        # common stretches [0, 4) and [5, 14)
        assert stacked.window_starts.tolist() == [5, 6, 7, 8]

    def test_failed_window_is_flagged(self, monkeypatch, pitch_model, center_state):
        series = self._pair(pitch_model, 7, center_state)
        real_fit = estimation.fit_mle

        def flaky(points, dt, start=None, config=None):
            if np.array_equal(points, series[1].samples[1:6]):
                raise NumericalError("singular", module="kalman", step=2)
            return real_fit(points, dt, start=start, config=config)

        monkeypatch.setattr(estimation, "fit_mle", flaky)
        stacked = sliding_window_fit_all(series, 5)

        assert [w.failed for w in stacked.windows] == [False, True]
        assert stacked.n_failed == 1
        assert np.isnan(stacked.predictions[1]).all()
        assert np.isfinite(stacked.prediction_rmse)

        rows = stacked_estimate_rows(stacked)
        assert [(r["window_start"], r["entity"]) for r in rows] == [(0, 3), (0, 9), (1, 3), (1, 9)]
        assert rows[2]["converged"] is False and math.isnan(rows[2]["q11"])
        assert set(rows[0]) == set(STACKED_ESTIMATE_COLUMNS)

    def test_no_common_stretch_rejected(self, pitch_model, center_state):
        with pytest.raises(DataError):
            sliding_window_fit_all(self._pair(pitch_model, 10, center_state, missing=[5]), 5)

    def test_window_below_minimum_rejected(self, pitch_model, center_state):
        with pytest.raises(DataError):
            sliding_window_fit_all(self._pair(pitch_model, 10, center_state), 4)
