"""
Tests for the simulator, the conditioning oracle and scripted trajectories.
"""
import numpy as np
import pytest

from app.services.errors import DataError, ModelError, NumericalError
from app.services.state_space import build_single, stack
from app.services.synthetic import (
    ORACLE_MAX_STEPS,
    box_muller,
    conditioning_oracle,
    make_rng,
    noise_streams,
    scripted_trajectory,
    simulate,
    trajectory_dataset,
)
from app.services.trajectory_data import FieldSpec


class TestBoxMuller:
    def test_seeded_draws_repeat(self):
        a = box_muller(make_rng(5), (7, 3))
        b = box_muller(make_rng(5), (7, 3))
        np.testing.assert_array_equal(a, b)
        assert a.shape == (7, 3)

    def test_cosine_half_then_sine_half(self):
        rng = make_rng(1)
        u1 = 1.0 - rng.random(2)
        u2 = rng.random(2)
        r = np.sqrt(-2.0 * np.log(u1))
        expected = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        np.testing.assert_array_equal(box_muller(make_rng(1), 4), expected)

    def test_moments(self):
        draws = box_muller(make_rng(0), 200_000)
        assert abs(draws.mean()) < 0.01
        assert abs(draws.std() - 1.0) < 0.01


class TestSimulate:
    def test_noiseless_constant_velocity(self):
        model = build_single(0.1, np.zeros((2, 2)), (1.0, 1.0))
        scenario = simulate(model, 3, seed=0, init_state=[0.0, 0.0, 100.0, 0.0], measurement_noise=False)
        np.testing.assert_allclose(scenario.observations, [[10.0, 0.0], [20.0, 0.0], [30.0, 0.0]])

    def test_noise_is_sigma_times_measurement_stream(self):
        model = build_single(0.1, np.zeros((2, 2)), (10.0, 10.0))
        scenario = simulate(model, 50, seed=17)
        expected = 10.0 * box_muller(noise_streams(17)[1], (50, 2))
        np.testing.assert_allclose(scenario.observations - scenario.truth[:, :2], expected, atol=1e-12)

    def test_same_seed_same_scenario(self, pitch_model):
        a = simulate(pitch_model, 40, seed=3)
        b = simulate(pitch_model, 40, seed=3)
        np.testing.assert_array_equal(a.observations, b.observations)
        np.testing.assert_array_equal(a.truth, b.truth)
        assert not np.array_equal(a.observations, simulate(pitch_model, 40, seed=4).observations)

    def test_sample_moments(self, pitch_model):
        scenario = simulate(pitch_model, 2000, seed=7)
        velocities = np.vstack([scenario.init_state[2:4], scenario.truth[:, 2:4]])
        accelerations = np.diff(velocities, axis=0) / 0.1
        noise = scenario.observations - scenario.truth[:, :2]

        np.testing.assert_allclose(accelerations.var(axis=0), [400.0, 400.0], rtol=0.10)
        np.testing.assert_allclose(noise.var(axis=0), [100.0, 100.0], rtol=0.10)

    def test_stacked_shapes(self, pitch_model):
        scenario = simulate(stack([pitch_model] * 3), 10, seed=0)
        assert scenario.truth.shape == (10, 12)
        assert scenario.observations.shape == (10, 6)
        assert sorted(scenario.to_series()) == [1, 2, 3]

    def test_rejects_bad_inputs(self, pitch_model):
        with pytest.raises(DataError):
            simulate(pitch_model, 0)
        with pytest.raises(DataError):
            simulate(pitch_model, 5, init_state=np.zeros(3))
        raw = build_single(0.1, np.array([[1.0, 0.0], [0.0, -1.0]]), (1.0, 1.0), mode="raw")
        with pytest.raises(ModelError):
            simulate(raw, 5)


class TestOracle:
    def test_single_step_is_bayes_update(self, random_unit_model):
        rng = np.random.default_rng(0)
        model = random_unit_model(rng)
        mean, cov = rng.normal(size=4), np.diag([1.0, 2.0, 3.0, 4.0])
        y = rng.normal(size=2)

        oracle = conditioning_oracle(model, y[None, :], (mean, cov))

        W, H = model.W, model.H
        S = W @ cov @ W.T + H
        gain = cov @ W.T @ np.linalg.inv(S)
        np.testing.assert_allclose(oracle.filtered_means[0], mean + gain @ (y - W @ mean), atol=1e-12)
        np.testing.assert_allclose(oracle.filtered_covs[0], cov - gain @ W @ cov, atol=1e-12)

    def test_step_limit(self, unit_model):
        with pytest.raises(DataError):
            conditioning_oracle(unit_model, np.zeros((ORACLE_MAX_STEPS + 1, 2)), (np.zeros(4), np.eye(4)))

    def test_singular_joint_covariance(self):
        model = build_single(0.1, np.zeros((2, 2)), (1e-6, 1e-6))
        prior = (np.zeros(4), np.diag([1e6, 1e6, 0.0, 0.0]))
        with pytest.raises(NumericalError, match="synthetic, step 2"):
            conditioning_oracle(model, np.zeros((2, 2)), prior)


class TestScripted:
    def test_line_is_collinear(self):
        series = scripted_trajectory("line", 10.0, seed=2)
        assert len(series) == 100
        centered = series.samples - series.samples.mean(axis=0)
        singular = np.linalg.svd(centered, compute_uv=False)
        assert singular[1] <= 1e-6 * singular[0]

    def test_loop_closes(self):
        series = scripted_trajectory("loop", 10.0, seed=3)
        np.testing.assert_allclose(series.samples[0], series.samples[-1], atol=1.0)

    def test_sprint_faster_than_loops(self):
        series = scripted_trajectory("sprint-and-loop", 50.0, seed=4)
        assert len(series) == 500
        speed = np.linalg.norm(np.diff(series.samples, axis=0), axis=1) / 0.1
        n_sprint = 100
        assert speed[:n_sprint - 1].mean() > speed[n_sprint:].max()

    @pytest.mark.parametrize("shape", ["line", "loop", "sprint-and-loop"])
    def test_inside_field(self, shape):
        field = FieldSpec()
        for seed in range(5):
            series = scripted_trajectory(shape, 20.0, seed=seed, jitter=5.0)
            assert field.contains(series.samples, tolerance=100.0).all()

    def test_duration_must_be_multiple_of_dt(self):
        with pytest.raises(DataError):
            scripted_trajectory("line", 10.05)

    def test_unknown_shape(self):
        with pytest.raises(DataError):
            scripted_trajectory("zigzag", 10.0)

    def test_dataset_shape_and_range(self):
        data = trajectory_dataset(6, 5.0, seed=1)
        assert data.shape == (6, 100)
        assert data.min() >= 0.0 and data.max() <= 1.0
        np.testing.assert_array_equal(data, trajectory_dataset(6, 5.0, seed=1))
