"""Tests for Kalman filtering, smoothing and EM parameter fitting."""

import warnings

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from tclmarket.agent import PriceStats, UserPrefs, compute_u1_u2
from tclmarket.config import EmSettings, NoiseKind
from tclmarket.errors import InvalidParameters, RankDeficient, SchemaError
from tclmarket.estimation import (
    MINUTE,
    KalmanTracker,
    MeasurementLog,
    UncertainModel,
    bid_from_estimate,
    draw_noise,
    e_step,
    em_fit,
    estimated_u1_u2,
    expected_complete_loglik,
    fit_population,
    kalman_filter,
    kalman_smoother,
    m_step,
    perturb_model,
    simulate_measurements,
)
from tclmarket.thermal import BuildingParams, HybridState, propagate


@pytest.fixture
def house():
    return BuildingParams(
        ca=900.0, cm=5000.0, ua=450.0, hm=4500.0, cooling_capacity=24000.0,
        internal_gain=2000.0, solar_air_fraction=0.5, rated_power=3.5,
    )


@pytest.fixture
def truth(house):
    return UncertainModel.from_building(
        house, q_cov=1e-4, r_var=0.05**2, m0=[74.0, 74.0], p0=0.01
    )


def weather(n, start=0):
    t = np.arange(start, start + n) / 60.0
    outdoor = 88.0 + 8.0 * np.sin(2 * np.pi * t / 24.0) + 0.5 * np.sin(2 * np.pi * t / 0.7)
    solar = 1500.0 + 1200.0 * np.sin(2 * np.pi * t / 24.0 + 0.4)
    return np.column_stack([outdoor, solar])


@pytest.fixture
def log_and_states(truth):
    return simulate_measurements(truth, weather(180), np.random.default_rng(0), setpoint=74.0)


def joint_gaussian_posterior(model, log):
    """Condition the stacked states on every measurement at once."""
    n = len(log)
    mean = np.zeros(2 * n)
    var = [model.p0]
    mean[:2] = model.m0
    for k in range(1, n):
        mean[2 * k : 2 * k + 2] = model.step_mean(mean[2 * k - 2 : 2 * k], log.exog[k - 1], log.modes[k - 1])
        var.append(model.a_bar @ var[-1] @ model.a_bar.T + model.q_cov)
    cov = np.zeros((2 * n, 2 * n))
    for k in range(n):
        for j in range(k + 1):
            block = np.linalg.matrix_power(model.a_bar, k - j) @ var[j]
            cov[2 * k : 2 * k + 2, 2 * j : 2 * j + 2] = block
            cov[2 * j : 2 * j + 2, 2 * k : 2 * k + 2] = block.T
    h = np.zeros((n, 2 * n))
    h[np.arange(n), 2 * np.arange(n)] = 1.0
    cov_y = h @ cov @ h.T + model.r_var * np.eye(n)
    gain = cov @ h.T @ np.linalg.inv(cov_y)
    post_mean = mean + gain @ (log.temps - h @ mean)
    post_cov = cov - gain @ h @ cov
    loglik = multivariate_normal(h @ mean, cov_y).logpdf(log.temps)
    return post_mean.reshape(n, 2), post_cov, loglik


@pytest.fixture
def small_case(house):
    model = UncertainModel.from_building(
        house,
        q_cov=np.array([[0.02, 0.005], [0.005, 0.01]]),
        r_var=0.1,
        m0=[74.0, 73.5],
        p0=0.5,
    )
    log = MeasurementLog(
        temps=np.array([74.1, 73.7, 73.9, 74.4]),
        modes=np.array([True, False, True, False]),
        exog=weather(4),
    )
    return model, log


class TestUncertainModel:
    """Test the discrete model type."""

    def test_rejects_indefinite_noise(self, truth):
        """Test the process noise must be positive semi-definite."""
        with pytest.raises(InvalidParameters):
            UncertainModel(**{**truth.to_dict(), "q_cov": [[1.0, 0.0], [0.0, -1.0]]})

    def test_rejects_non_finite(self, truth):
        """Test NaN parameters are rejected."""
        with pytest.raises(InvalidParameters):
            UncertainModel(**{**truth.to_dict(), "c_on": [float("nan"), 0.0]})

    def test_from_dict_requires_every_field(self, truth):
        """Test a model file missing a field is a schema error."""
        data = truth.to_dict()
        del data["b_bar"]
        with pytest.raises(SchemaError):
            UncertainModel.from_dict(data)

    @pytest.mark.parametrize("on", [True, False])
    def test_exact_discretization(self, house, on):
        """Test one noise-free model step equals one minute of the continuous model."""
        model = UncertainModel.from_building(house)
        exog = np.array([92.0, 1800.0])
        params = house.etp_params(*exog)
        eta = np.array([74.0, 73.2])
        expected = propagate(HybridState(eta, on), params, MINUTE)
        np.testing.assert_allclose(model.step_mean(eta, exog, on), expected, atol=1e-10)


class TestMeasurementLog:
    """Test measurement log validation."""

    def test_too_short(self):
        """Test fewer than three samples is a schema error."""
        with pytest.raises(SchemaError):
            MeasurementLog(np.array([74.0, 74.1]), np.array([True, False]), weather(2))

    def test_ragged(self):
        """Test columns of different length are a schema error."""
        with pytest.raises(SchemaError):
            MeasurementLog(np.ones(4), np.ones(3, dtype=bool), weather(4))

    def test_tail(self, log_and_states):
        """Test the tail keeps the latest samples."""
        log, _ = log_and_states
        tail = log.tail(10)
        assert len(tail) == 10
        np.testing.assert_array_equal(tail.temps, log.temps[-10:])


class TestFilterSmoother:
    """Test the Kalman filter and RTS smoother against exact conditioning."""

    def test_loglik_matches_joint_gaussian(self, small_case):
        """Test the filter log-likelihood equals the marginal density of y."""
        model, log = small_case
        _, _, expected = joint_gaussian_posterior(model, log)
        assert kalman_filter(model, log).loglik == pytest.approx(expected, abs=1e-9)

    def test_smoothed_moments_match_joint_gaussian(self, small_case):
        """Test smoothed means, covariances and lag-one cross covariances."""
        model, log = small_case
        means, cov, _ = joint_gaussian_posterior(model, log)
        post = e_step(model, log)
        np.testing.assert_allclose(post.means, means, atol=1e-9)
        for k in range(len(log)):
            np.testing.assert_allclose(post.covs[k], cov[2 * k : 2 * k + 2, 2 * k : 2 * k + 2], atol=1e-9)
        for k in range(1, len(log)):
            block = cov[2 * k : 2 * k + 2, 2 * k - 2 : 2 * k]
            np.testing.assert_allclose(post.cross_covs[k], block, atol=1e-9)
            np.testing.assert_allclose(
                post.pairwise[k], block + np.outer(means[k], means[k - 1]), atol=1e-7
            )

    def test_last_smoothed_equals_filtered(self, small_case):
        """Test the smoother leaves the final filtered estimate unchanged."""
        model, log = small_case
        filtered = kalman_filter(model, log)
        post = kalman_smoother(filtered, model, log)
        np.testing.assert_array_equal(post.means[-1], filtered.means[-1])

    def test_huge_process_noise_tracks_measurements(self, small_case):
        """Test an uninformative prior puts the air estimate on the measurement."""
        model, log = small_case
        loose = UncertainModel(**{**model.to_dict(), "q_cov": np.eye(2) * 1e8, "r_var": 1e-6, "p0": np.eye(2) * 1e8})
        post = e_step(loose, log)
        np.testing.assert_allclose(post.means[:, 0], log.temps, atol=1e-3)

    def test_tracker_matches_filter(self, log_and_states, truth):
        """Test the online tracker reproduces the batch filter."""
        log, _ = log_and_states
        tracker = KalmanTracker(truth, truth.m0, truth.p0)
        tracker.update(log.temps[0])
        for k in range(1, len(log)):
            tracker.step(log.temps[k], log.exog[k - 1], log.modes[k - 1])
        filtered = kalman_filter(truth, log)
        np.testing.assert_allclose(tracker.mean, filtered.means[-1], atol=1e-9)
        np.testing.assert_allclose(tracker.cov, filtered.covs[-1], atol=1e-12)


class TestMStep:
    """Test the closed-form parameter update."""

    def test_improves_expected_loglik(self, log_and_states, truth):
        """Test the update does not lower the expected complete log-likelihood."""
        log, _ = log_and_states
        init = perturb_model(truth, 0.1, np.random.default_rng(1))
        post = e_step(init, log)
        new = m_step(post, log, init)
        assert expected_complete_loglik(new, post, log) >= expected_complete_loglik(init, post, log)

    def test_joint_update_is_stationary(self, log_and_states, truth):
        """Test small perturbations of the joint update never beat it."""
        log, _ = log_and_states
        post = e_step(truth, log)
        new = m_step(post, log, truth, joint_linear_update=True)
        best = expected_complete_loglik(new, post, log)
        rng = np.random.default_rng(2)
        for name in ("a_bar", "b_bar", "c_on", "c_off"):
            value = getattr(new, name)
            bumped = value + 1e-6 * np.abs(value).max() * rng.standard_normal(value.shape)
            candidate = UncertainModel(**{**new.to_dict(), name: bumped})
            assert expected_complete_loglik(candidate, post, log) <= best + 1e-9
        for scale in (0.9, 1.1):
            candidate = UncertainModel(**{**new.to_dict(), "r_var": new.r_var * scale})
            assert expected_complete_loglik(candidate, post, log) <= best
            candidate = UncertainModel(**{**new.to_dict(), "q_cov": new.q_cov * scale})
            assert expected_complete_loglik(candidate, post, log) <= best

    def test_constant_weather_is_rank_deficient(self, truth):
        """Test a log without weather variation cannot identify B."""
        exog = np.tile([90.0, 0.0], (60, 1))
        log, _ = simulate_measurements(truth, exog, np.random.default_rng(3), setpoint=74.0)
        with pytest.raises(RankDeficient):
            m_step(e_step(truth, log), log, truth)


class TestEm:
    """Test the EM loop."""

    def test_monotone_loglik(self, log_and_states, truth):
        """Test the log-likelihood never drops across iterations."""
        log, _ = log_and_states
        init = perturb_model(truth, 0.1, np.random.default_rng(4))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            result = em_fit(log, init, EmSettings(max_iters=15))
        trace = np.array(result.loglik_trace)
        assert result.non_monotone is False
        assert np.all(np.diff(trace) >= -1e-9 * np.abs(trace[:-1]).clip(1.0))
        assert trace[-1] > trace[0]

    def test_converges_from_truth(self, log_and_states, truth):
        """Test starting at the data-generating model converges quickly."""
        log, _ = log_and_states
        result = em_fit(log, truth, EmSettings(max_iters=200, tol=1e-3))
        assert result.converged

    def test_iteration_cap(self, log_and_states, truth):
        """Test the iteration cap is honoured."""
        log, _ = log_and_states
        result = em_fit(log, perturb_model(truth, 0.1, np.random.default_rng(5)), max_iters=2, tol=1e-300)
        assert result.iterations == 2
        assert len(result.loglik_trace) == 3
        assert result.converged is False

    def test_fit_population(self, log_and_states, truth):
        """Test independent fits of several households."""
        log, _ = log_and_states
        inits = [perturb_model(truth, 0.1, np.random.default_rng(s)) for s in range(2)]
        results = fit_population([log, log], inits, EmSettings(max_iters=3))
        assert len(results) == 2
        assert all(r.iterations <= 3 for r in results)

    def test_fit_population_length_mismatch(self, log_and_states, truth):
        """Test logs and initial models must pair up."""
        log, _ = log_and_states
        with pytest.raises(InvalidParameters):
            fit_population([log], [truth, truth])

    @pytest.mark.slow
    def test_bid_accuracy_from_perturbed_start(self, house):
        """Test a six-hour log recovers the known-parameter bid from a 10% error."""
        truth = UncertainModel.from_building(house, q_cov=1e-4, r_var=0.05**2, m0=[74.0, 74.0], p0=0.01)
        log, _ = simulate_measurements(truth, weather(360, start=600), np.random.default_rng(6), setpoint=74.0)
        init = perturb_model(truth, 0.1, np.random.default_rng(7))
        result = em_fit(log, init, EmSettings(max_iters=500, tol=1e-10))
        prefs = UserPrefs(70.0, 74.0, 78.0)
        stats = PriceStats(0.1, 0.02)
        estimated = bid_from_estimate(result.model, log, prefs, stats, 3.5, posterior=result.posterior)
        known = bid_from_estimate(truth, log, prefs, stats, 3.5)
        assert abs(estimated.price - known.price) / known.price < 0.02


class TestBidFromEstimate:
    """Test transition setpoints and bids from an estimated model."""

    def test_matches_known_parameters_when_on(self, house):
        """Test the exact discretization reproduces u1 and u2 of a load that is on."""
        model = UncertainModel.from_building(house)
        exog = np.array([92.0, 1800.0])
        params = house.etp_params(*exog)
        state = HybridState(np.array([74.3, 74.0]), True)
        u1, u2 = estimated_u1_u2(model, state.eta, True, exog, params.deadband, horizon_steps=5)
        ref1, ref2 = compute_u1_u2(state, params)
        assert u1 == pytest.approx(ref1, abs=1e-9)
        assert u2 == pytest.approx(ref2, abs=1e-6)

    def test_ordering(self, truth):
        """Test u2 <= u1 in both relay states."""
        for on in (True, False):
            u1, u2 = estimated_u1_u2(truth, np.array([74.0, 74.2]), on, np.array([92.0, 1800.0]), 1.0)
            assert u2 <= u1

    def test_bid(self, log_and_states, truth):
        """Test the bid carries the measured quantity and a price inside the curve range."""
        log, _ = log_and_states
        prefs = UserPrefs(70.0, 74.0, 78.0)
        stats = PriceStats(0.1, 0.02)
        bid = bid_from_estimate(truth, log, prefs, stats, 3.5, load_id="h0001")
        assert bid.quantity == 3.5
        assert bid.load_id == "h0001"
        assert 0.08 <= bid.price <= 0.12


class TestSynthetic:
    """Test noise draws and synthetic logs."""

    def test_uniform_noise_variance(self):
        """Test uniform noise has the requested covariance and bounded support."""
        cov = np.diag([0.04, 0.01])
        draws = draw_noise(np.random.default_rng(8), cov, NoiseKind.UNIFORM, 200000)
        np.testing.assert_allclose(np.cov(draws.T), cov, rtol=0.03, atol=1e-4)
        assert np.all(np.abs(draws[:, 0]) <= np.sqrt(3 * 0.04) + 1e-12)

    def test_gaussian_noise_variance(self):
        """Test Gaussian noise has the requested covariance."""
        cov = np.array([[0.04, 0.01], [0.01, 0.02]])
        draws = draw_noise(np.random.default_rng(9), cov, NoiseKind.GAUSSIAN, 200000)
        np.testing.assert_allclose(np.cov(draws.T), cov, rtol=0.03, atol=1e-4)

    def test_hysteresis_modes(self, log_and_states):
        """Test thermostat-driven logs switch both ways."""
        log, states = log_and_states
        assert states.shape == (len(log), 2)
        assert log.modes.any() and (~log.modes).any()

    def test_given_modes(self, truth):
        """Test explicit relay states are used verbatim."""
        modes = np.array([True, False] * 10)
        log, _ = simulate_measurements(truth, weather(20), np.random.default_rng(10), modes=modes)
        np.testing.assert_array_equal(log.modes, modes)

    def test_needs_modes_or_setpoint(self, truth):
        """Test a policy is required."""
        with pytest.raises(InvalidParameters):
            simulate_measurements(truth, weather(10), np.random.default_rng(11))

    def test_perturb_model_bounds(self, truth):
        """Test every linear parameter stays within the relative error."""
        guess = perturb_model(truth, 0.1, np.random.default_rng(12))
        for name in ("a_bar", "b_bar", "c_on", "c_off"):
            ratio = getattr(guess, name) / np.where(getattr(truth, name) == 0, 1.0, getattr(truth, name))
            mask = getattr(truth, name) != 0
            assert np.all(np.abs(ratio[mask] - 1.0) <= 0.1 + 1e-12)
        np.testing.assert_array_equal(guess.q_cov, truth.q_cov)
