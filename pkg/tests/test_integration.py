"""End-to-end experiments at acceptance scale; run with ``pytest -m slow``."""

import numpy as np
import pytest

from tclmarket.agent import PriceStats
from tclmarket.config import MILD_WEATHER, BiddingMode, EmSettings, NoiseKind, ScenarioConfig
from tclmarket.data_io import ingest_weather
from tclmarket.estimation import (
    UncertainModel,
    bid_from_estimate,
    em_fit,
    fit_population,
    perturb_model,
    simulate_measurements,
)
from tclmarket.market import CostKind, CostModel, clear_responses, solve_team_problem, verify_realization
from tclmarket.population import synthesize_population
from tclmarket.scenario import (
    influence_index,
    minimal_capping_gamma,
    paired_welfare_comparison,
    run_scenario,
    summarize,
)
from tests.test_market import random_valuations

pytestmark = pytest.mark.slow

LOG_START = 10 * 60  # 10:00, six hours of varying sun and temperature
LOG_LENGTH = 360


@pytest.fixture(scope="module")
def hot_day():
    config = ScenarioConfig(n_households=100, seed=0)
    population = synthesize_population(config.n_households, config.seed, config.period_hours)
    return config, population, run_scenario(config, population)


def synthetic_fits(init_error, noise=NoiseKind.GAUSSIAN, n=50, seed=11, settings=None):
    """Bid-price errors of EM fits against known-parameter bids."""
    population = synthesize_population(n, seed)
    weather = ingest_weather(ScenarioConfig().weather_path)
    exog = np.array([weather.at(LOG_START + k) for k in range(LOG_LENGTH)])
    rng = np.random.default_rng(seed)
    stats = PriceStats(0.10, 0.02)

    logs, inits, truths = [], [], []
    for h in population:
        truth = UncertainModel.from_building(
            h.building, q_cov=1e-4, r_var=0.05**2, m0=[h.prefs.t_desired] * 2, p0=0.01
        )
        log, _ = simulate_measurements(truth, exog, rng, setpoint=h.prefs.t_desired, noise=noise)
        logs.append(log)
        inits.append(perturb_model(truth, init_error, rng))
        truths.append(truth)

    results = fit_population(logs, inits, settings or EmSettings(max_iters=200, tol=1e-7), n_jobs=-1)
    errors = []
    for h, log, truth, result in zip(population, logs, truths, results):
        q = h.building.rated_power
        estimated = bid_from_estimate(result.model, log, h.prefs, stats, q, posterior=result.posterior)
        known = bid_from_estimate(truth, log, h.prefs, stats, q)
        errors.append(abs(estimated.price - known.price) / known.price * 100.0)
    return np.array(errors)


class TestTeamOptimality:
    """Test clearing against the team optimum on many random markets."""

    def test_random_populations(self):
        """Test five hundred random markets are realized by the clearing price."""
        rng = np.random.default_rng(100)
        for _ in range(500):
            valuations = random_valuations(rng, int(rng.integers(5, 51)))
            if rng.random() < 0.5:
                cost = CostModel.at_base_price(float(rng.uniform(0.5, 5.0)))
            else:
                cost = CostModel(
                    CostKind.QUADRATIC, linear=float(rng.uniform(0.5, 5.0)), quadratic=float(rng.uniform(0.01, 1.0))
                )
            capacity = float(rng.uniform(0.05, 1.2)) * sum(v.a_max for v in valuations)
            report = verify_realization(
                solve_team_problem(valuations, cost, capacity),
                clear_responses(valuations, cost, capacity),
                valuations,
                cost,
            )
            assert report.realized, report.to_dict()


class TestHotDay:
    """Test a day of 5-minute markets with 100 households."""

    def test_capacity_capped(self, hot_day):
        """Test realized power stays under capacity in every period."""
        _, _, records = hot_day
        assert any(r.clearing.congested for r in records)
        assert all(r.realized_power <= r.capacity + 1e-6 for r in records)

    def test_cleared_tracks_realized(self, hot_day):
        """Test cleared and realized power differ by at most one unit in every period."""
        _, population, records = hot_day
        largest = max(h.building.rated_power for h in population)
        assert all(abs(r.cleared_power - r.realized_power) <= largest for r in records)

    def test_perturbed_bids(self, hot_day):
        """Test a 2% bid perturbation keeps the overshoot within 5% of capacity."""
        config, population, _ = hot_day
        perturbed = config.model_copy(update={"bidding_mode": BiddingMode.PERTURBED, "perturb_pct": 2.0})
        summary = summarize(run_scenario(perturbed, population))
        assert summary["max_overshoot_pct"] <= 5.0

    def test_welfare_against_fixed_ratio(self, hot_day):
        """Test the mechanism beats the smallest capping fixed ratio in every congested period."""
        config, population, _ = hot_day
        found = minimal_capping_gamma(config, population=population, paired=True)
        assert found is not None
        comparison = paired_welfare_comparison(found[1])
        assert comparison.periods
        assert all(d >= -1e-9 for d in comparison.differences)


class TestWeatherDays:
    """Test a mild day against the hot day."""

    def test_mild_day_congests_less(self, hot_day):
        """Test the mild day congests no more often and both days stay capped and tracked."""
        config, population, hot_records = hot_day
        mild_records = run_scenario(config.model_copy(update={"weather_path": MILD_WEATHER}), population)
        hot, mild = summarize(hot_records), summarize(mild_records)
        largest = max(h.building.rated_power for h in population)

        assert mild["congested_periods"] <= hot["congested_periods"]
        assert hot["capped_fraction"] == mild["capped_fraction"] == 1.0
        assert hot["max_abs_cleared_minus_realized_kw"] <= largest
        assert mild["max_abs_cleared_minus_realized_kw"] <= largest


class TestEstimationAccuracy:
    """Test EM bids against known-parameter bids on fifty households."""

    def test_gaussian_ten_percent(self):
        """Test mean bid error under 1% from a 10% initial error."""
        assert synthetic_fits(0.10).mean() < 1.0

    def test_gaussian_fifty_percent(self):
        """Test mean bid error under 1% from a 50% initial error."""
        assert synthetic_fits(0.50, settings=EmSettings(max_iters=1000, tol=1e-9)).mean() < 1.0

    def test_uniform_noise(self):
        """Test mean bid error under 2% with uniform noise."""
        assert synthetic_fits(0.10, NoiseKind.UNIFORM).mean() < 2.0

    def test_monotone_over_many_fits(self):
        """Test the log-likelihood never drops over a hundred random fits."""
        population = synthesize_population(100, seed=12)
        weather = ingest_weather(ScenarioConfig().weather_path)
        exog = np.array([weather.at(LOG_START + k) for k in range(120)])
        rng = np.random.default_rng(12)
        for h in population:
            truth = UncertainModel.from_building(
                h.building, q_cov=1e-4, r_var=0.05**2, m0=[h.prefs.t_desired] * 2, p0=0.01
            )
            log, _ = simulate_measurements(truth, exog, rng, setpoint=h.prefs.t_desired)
            trace = np.array(em_fit(log, perturb_model(truth, 0.1, rng), max_iters=10).loglik_trace)
            assert np.all(np.diff(trace) >= -1e-9 * np.abs(trace[:-1]).clip(1.0))


class TestInfluence:
    """Test how far one household moves the price as the population grows."""

    def test_index_shrinks_with_population(self):
        """Test the index is under 1% at 200 households and under 0.4% at 500."""
        results = dict(influence_index(ScenarioConfig(seed=0), [200, 500], n_seeds=20, n_jobs=-1))
        assert results[200] < 1.0
        assert results[500] < 0.4

    def test_index_non_increasing(self):
        """Test the seed-averaged index never grows with the population."""
        results = influence_index(ScenarioConfig(seed=0), [50, 100, 200, 500], n_seeds=20, n_jobs=-1)
        values = [value for _, value in results]
        assert all(b <= a for a, b in zip(values, values[1:]))
