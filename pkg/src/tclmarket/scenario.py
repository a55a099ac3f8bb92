"""The 5-minute market loop and the experiments built on it."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Deque, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from tqdm import tqdm

from tclmarket.agent import (
    Bid,
    PriceHistory,
    PriceStats,
    bid_from_setpoints,
    bid_price_from_curve,
    compute_u1_u2,
    realistic_bid,
    setpoint_on_step,
    temperature_bid,
)
from tclmarket.config import BiddingMode, PricingMode, ScenarioConfig
from tclmarket.data_io import PriceSeries, WeatherSeries, ingest_prices, ingest_weather
from tclmarket.errors import Infeasible, InvalidParameters, RankDeficient, SingularPrediction
from tclmarket.estimation import (
    KalmanTracker,
    MeasurementLog,
    UncertainModel,
    draw_noise,
    em_fit,
    estimated_u1_u2,
    fit_population,
    perturb_model,
)
from tclmarket.market import (
    ClearingResult,
    CostModel,
    DemandCurve,
    build_demand_curve,
    clear,
    welfare,
)
from tclmarket.population import Household, aggregate_rated_power, synthesize_population
from tclmarket.thermal import EtpParams, HybridState, sample_period, simulate_period

logger = logging.getLogger(__name__)

DEFAULT_GAMMAS = tuple(round(1.0 + 0.1 * i, 1) for i in range(41))
INFLUENCE_MINUTE = 15 * 60  # mid-afternoon
INFLUENCE_STEPS = 41
MIN_NOISE_VAR = 1e-6
CAPPED_TOL = 1e-6  # kW


@dataclass
class PeriodRecord:
    index: int
    base_price: float
    clearing: ClearingResult
    capacity: float
    cleared_power: float
    realized_power: float
    welfare: float
    setpoints: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)
    air_temps: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)
    paired_price: Optional[float] = None
    paired_realized_power: Optional[float] = None
    paired_welfare: Optional[float] = None

    @property
    def capped(self) -> bool:
        return self.realized_power <= self.capacity + CAPPED_TOL

    def to_row(self) -> Dict[str, Any]:
        return {
            "period": self.index,
            "price": self.clearing.price,
            "p_bar": self.clearing.p_bar,
            "p_star": self.clearing.p_star,
            "congested": self.clearing.congested,
            "cleared_kw": self.cleared_power,
            "realized_kw": self.realized_power,
            "welfare": self.welfare,
        }


@dataclass
class WelfareComparison:
    periods: List[int]
    mechanism: List[float]
    baseline: List[float]

    @property
    def differences(self) -> List[float]:
        return [m - b for m, b in zip(self.mechanism, self.baseline)]

    @property
    def total_difference(self) -> float:
        return float(sum(self.differences))


class _Offer(NamedTuple):
    """A submitted bid with the step the household actually follows."""

    bid: Bid
    u1: float
    u2: float
    price: float


def _check_coverage(config: ScenarioConfig, weather: WeatherSeries, prices: PriceSeries) -> None:
    last_start = (config.n_periods - 1) * config.period_minutes
    weather.at(last_start)
    prices.at_minute(last_start)


def _fixed_ratio_clearing(
    curve: DemandCurve, base_price: float, cost: CostModel, capacity: float, period: float, gamma: float
) -> ClearingResult:
    uncapped = clear(curve, base_price, cost, float("inf"), period)
    if curve.demand_at(uncapped.price) <= capacity:
        return uncapped
    priced = clear(curve, base_price, CostModel.at_base_price(gamma * uncapped.price), float("inf"), period)
    priced.congested = True
    return priced


def _clear_period(
    config: ScenarioConfig, curve: DemandCurve, base_price: float, cost: CostModel, capacity: float
) -> ClearingResult:
    period = config.period_hours
    if config.pricing_mode is PricingMode.MECHANISM:
        return clear(curve, base_price, cost, capacity, period, config.partial_marginal_service)
    if config.pricing_mode is PricingMode.RTP:
        return clear(curve, base_price, cost, float("inf"), period)
    return _fixed_ratio_clearing(curve, base_price, cost, capacity, period, config.gamma)


class _OutputBasedBidder:
    """Per-household measurement logs, EM fits and online trackers."""

    def __init__(self, config: ScenarioConfig, population: Sequence[Household], rng: np.random.Generator):
        self.config = config
        self.population = population
        self.rng = rng
        self.window = int(round(config.warmup_hours * 60))
        self.logs: List[Deque[Tuple[float, bool, np.ndarray]]] = [
            deque(maxlen=self.window) for _ in population
        ]
        self.models: List[UncertainModel] = []
        self.trackers: List[KalmanTracker] = []
        self.pending: List[Tuple[np.ndarray, bool]] = []
        self.current_y = np.zeros(len(population))

    def _measure(self, temps: np.ndarray) -> np.ndarray:
        std = self.config.measurement_noise
        return temps + draw_noise(self.rng, np.array([[std * std]]), self.config.noise_kind, len(temps))[:, 0]

    def _log(self, i: int) -> MeasurementLog:
        temps, modes, exog = zip(*self.logs[i])
        return MeasurementLog(np.array(temps), np.array(modes), np.array(exog))

    def _truth(self, h: Household, first: np.ndarray) -> UncertainModel:
        cfg = self.config
        return UncertainModel.from_building(
            h.building,
            q_cov=max(cfg.process_noise**2, MIN_NOISE_VAR),
            r_var=max(cfg.measurement_noise**2, MIN_NOISE_VAR),
            m0=first,
            p0=1e-2,
        )

    def warm_up(self, states: List[HybridState], weather: WeatherSeries) -> List[HybridState]:
        """Thermostats at their desired setpoints over the history window, then a first fit."""
        cfg = self.config
        n_periods = max(1, self.window // cfg.period_minutes)
        start = len(weather) - 1 - n_periods * cfg.period_minutes
        first = [np.array([s.t_c, s.eta[1]]) for s in states]
        for w in range(n_periods):
            zeta = np.array(weather.at(start + w * cfg.period_minutes, wrap=True))
            for i, h in enumerate(self.population):
                params = h.building.etp_params(zeta[0], zeta[1], cfg.deadband, cfg.period_hours)
                temps, modes, states[i], _ = sample_period(
                    states[i], h.prefs.t_desired, params, cfg.period_minutes
                )
                for y, q in zip(self._measure(temps), modes):
                    self.logs[i].append((float(y), bool(q), zeta))

        inits = [perturb_model(self._truth(h, f), cfg.init_error, self.rng) for h, f in zip(self.population, first)]
        logs = [self._log(i) for i in range(len(self.population))]
        try:
            results = fit_population(logs, inits, cfg.em, cfg.n_jobs)
            self.models = [r.model for r in results]
            self.trackers = [KalmanTracker.from_posterior(r.model, r.posterior) for r in results]
        except (RankDeficient, SingularPrediction) as e:
            logger.warning(f"initial fit failed ({e}); bidding from the initial guesses")
            self.models = inits
            self.trackers = [KalmanTracker(m, log.temps[-1:].repeat(2), m.p0) for m, log in zip(inits, logs)]
        self.pending = [(log.exog[-1], bool(log.modes[-1])) for log in logs]
        logger.info(f"output-based bidding warmed up on {len(logs[0])} samples per household")
        return states

    def refit(self) -> None:
        for i in range(len(self.population)):
            log = self._log(i)
            try:
                result = em_fit(log, self.models[i], self.config.em)
            except (RankDeficient, SingularPrediction) as e:
                logger.warning(f"refit of {self.population[i].load_id} skipped: {e}")
                continue
            self.models[i] = result.model
            self.trackers[i] = KalmanTracker.from_posterior(result.model, result.posterior)
            self.pending[i] = (log.exog[-1], bool(log.modes[-1]))

    def offer(self, i: int, state: HybridState, zeta: np.ndarray, stats: PriceStats) -> _Offer:
        h = self.population[i]
        y0 = float(self._measure(np.array([state.t_c]))[0])
        self.current_y[i] = y0
        tracker = self.trackers[i]
        tracker.step(y0, *self.pending[i])
        u1, u2 = estimated_u1_u2(
            self.models[i], tracker.mean, state.on, zeta, self.config.deadband, self.config.em.horizon_steps
        )
        bid = bid_from_setpoints(u1, u2, h.prefs, stats, h.building.rated_power, h.load_id)
        return _Offer(bid, u1, u2, bid.price)

    def observe(self, i: int, temps: np.ndarray, modes: np.ndarray, zeta: np.ndarray) -> None:
        ys = np.concatenate([[self.current_y[i]], self._measure(temps[1:])])
        tracker = self.trackers[i]
        self.logs[i].append((float(ys[0]), bool(modes[0]), zeta))
        for j in range(1, len(ys)):
            tracker.step(float(ys[j]), zeta, bool(modes[j - 1]))
            self.logs[i].append((float(ys[j]), bool(modes[j]), zeta))
        self.pending[i] = (zeta, bool(modes[-1]))


def _offer(
    config: ScenarioConfig,
    h: Household,
    state: HybridState,
    params: EtpParams,
    stats: PriceStats,
    rng: np.random.Generator,
) -> _Offer:
    q = h.building.rated_power
    u1, u2 = compute_u1_u2(state, params)
    if config.bidding_mode is BiddingMode.TEMPERATURE:
        bid = temperature_bid(state, h.prefs, stats, q, h.load_id)
        return _Offer(bid, u1, u2, bid.price)
    bid = bid_from_setpoints(u1, u2, h.prefs, stats, q, h.load_id)
    if config.bidding_mode is BiddingMode.PERTURBED:
        # The market sees the perturbed price; the thermostat still follows its own step.
        eps = config.perturb_pct / 100.0
        sent = Bid(bid.price * (1.0 + rng.uniform(-eps, eps)), bid.quantity, bid.load_id)
        return _Offer(sent, u1, u2, bid.price)
    return _Offer(bid, u1, u2, bid.price)


def _respond(
    price: float, offers: Sequence[_Offer], population: Sequence[Household], stats: PriceStats
) -> np.ndarray:
    return np.array(
        [setpoint_on_step(price, o.price, o.u1, o.u2, h.prefs, stats) for o, h in zip(offers, population)]
    )


def run_scenario(
    config: ScenarioConfig,
    population: Optional[Sequence[Household]] = None,
    weather: Optional[WeatherSeries] = None,
    prices: Optional[PriceSeries] = None,
    progress: bool = False,
    paired_gamma: Optional[float] = None,
) -> List[PeriodRecord]:
    """Bid, clear, respond and simulate every household for each market period.

    With ``paired_gamma`` every period is also cleared by the fixed-ratio
    baseline and simulated from the same starting states, without advancing
    them; the outcome lands in the ``paired_*`` fields of each record.
    """
    if paired_gamma is not None and paired_gamma < 1.0:
        raise InvalidParameters(f"paired_gamma must be at least 1, got {paired_gamma}")
    population = list(population) if population is not None else synthesize_population(
        config.n_households, config.seed, config.period_hours, config.deadband, config.k_max
    )
    weather = weather or ingest_weather(config.weather_path)
    prices = prices or ingest_prices(config.price_path)
    _check_coverage(config, weather, prices)

    q_uc = config.resolve_unresponsive()
    capacity = config.resolve_capacity(aggregate_rated_power(population))
    if q_uc >= capacity:
        raise Infeasible(f"unresponsive load {q_uc:.1f} kW leaves no room under {capacity:.1f} kW")
    period = config.period_hours
    history = PriceHistory.from_base_prices(prices.prices, config.price_window)
    bid_rng, noise_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))

    states = [h.init_state for h in population]
    bidder: Optional[_OutputBasedBidder] = None
    if config.bidding_mode is BiddingMode.OUTPUT_BASED:
        bidder = _OutputBasedBidder(config, population, noise_rng)
        states = bidder.warm_up(states, weather)

    logger.info(
        f"running {config.n_periods} periods: {len(population)} households, "
        f"capacity {capacity:.1f} kW, unresponsive {q_uc:.1f} kW, "
        f"{config.bidding_mode.value} bids, {config.pricing_mode.value} pricing"
    )
    records: List[PeriodRecord] = []
    for k in tqdm(range(config.n_periods), disable=not progress, desc="periods"):
        minute = k * config.period_minutes
        zeta = np.array(weather.at(minute))
        base_price = prices.at_minute(minute)
        params = [h.building.etp_params(zeta[0], zeta[1], config.deadband, period) for h in population]
        stats = history.stats

        if bidder is not None and k > 0 and k % config.refit_every_periods == 0:
            bidder.refit()
        if bidder is not None:
            offers = [bidder.offer(i, s, zeta, stats) for i, s in enumerate(states)]
        else:
            offers = [_offer(config, h, s, p, stats, bid_rng) for h, s, p in zip(population, states, params)]

        curve = build_demand_curve([o.bid for o in offers], q_uc)
        cost = config.cost.model(base_price)
        clearing = _clear_period(config, curve, base_price, cost, capacity)
        history.push(clearing.price)

        paired: Optional[Tuple[ClearingResult, np.ndarray]] = None
        if paired_gamma is not None:
            paired_clearing = _fixed_ratio_clearing(curve, base_price, cost, capacity, period, paired_gamma)
            paired_setpoints = _respond(paired_clearing.price, offers, population, stats)
            paired = paired_clearing, np.array(
                [simulate_period(s, u, p)[1] for s, u, p in zip(states, paired_setpoints, params)]
            )

        setpoints = _respond(clearing.price, offers, population, stats)
        energies = np.empty(len(population))
        for i, h in enumerate(population):
            temps, modes, states[i], energies[i] = sample_period(
                states[i], setpoints[i], params[i], config.period_minutes
            )
            if bidder is not None:
                bidder.observe(i, temps, modes, zeta)

        records.append(
            PeriodRecord(
                index=k,
                base_price=base_price,
                clearing=clearing,
                capacity=capacity,
                cleared_power=clearing.cleared_power,
                realized_power=q_uc + float(energies.sum()) / period,
                welfare=welfare(energies, [h.valuation for h in population], cost),
                setpoints=setpoints,
                air_temps=np.array([s.t_c for s in states]),
            )
        )
        if paired is not None:
            records[-1].paired_price = paired[0].price
            records[-1].paired_realized_power = q_uc + float(paired[1].sum()) / period
            records[-1].paired_welfare = welfare(paired[1], [h.valuation for h in population], cost)
        logger.debug(
            f"period {k}: price {clearing.price:.4f}, cleared {clearing.cleared_power:.1f} kW, "
            f"realized {records[-1].realized_power:.1f} kW"
        )
    return records


def fixed_ratio_baseline(
    config: ScenarioConfig, gamma: float, population: Optional[Sequence[Household]] = None
) -> List[PeriodRecord]:
    """Base price when uncongested, gamma times the base price otherwise."""
    baseline = config.model_copy(update={"pricing_mode": PricingMode.FIXED_RATIO, "gamma": gamma})
    return run_scenario(baseline, population)


def minimal_capping_gamma(
    config: ScenarioConfig,
    gammas: Sequence[float] = DEFAULT_GAMMAS,
    population: Optional[Sequence[Household]] = None,
    paired: bool = False,
) -> Optional[Tuple[float, List[PeriodRecord]]]:
    """Smallest ratio whose baseline keeps realized power under capacity in every period.

    With ``paired`` each candidate is judged on the baseline paired with the
    mechanism run, and the returned records are the mechanism's, carrying the
    baseline in their ``paired_*`` fields.
    """
    mechanism = config.model_copy(update={"pricing_mode": PricingMode.MECHANISM})
    for gamma in sorted(gammas):
        if paired:
            records = run_scenario(mechanism, population, paired_gamma=gamma)
            capped = all(
                r.paired_realized_power is not None and r.paired_realized_power <= r.capacity + CAPPED_TOL
                for r in records
            )
        else:
            records = fixed_ratio_baseline(config, gamma, population)
            capped = all(r.capped for r in records)
        if capped:
            logger.info(f"gamma {gamma} caps the feeder")
            return gamma, records
        logger.debug(f"gamma {gamma} does not cap the feeder")
    return None


def welfare_comparison(
    mechanism: Sequence[PeriodRecord], baseline: Sequence[PeriodRecord]
) -> WelfareComparison:
    """Welfare of both runs over the periods the mechanism found congested."""
    congested = [(m, b) for m, b in zip(mechanism, baseline) if m.clearing.congested]
    return WelfareComparison(
        periods=[m.index for m, _ in congested],
        mechanism=[m.welfare for m, _ in congested],
        baseline=[b.welfare for _, b in congested],
    )


def paired_welfare_comparison(records: Sequence[PeriodRecord]) -> WelfareComparison:
    """Welfare against the paired baseline over congested periods, from shared starting states."""
    congested = [r for r in records if r.clearing.congested and r.paired_welfare is not None]
    return WelfareComparison(
        periods=[r.index for r in congested],
        mechanism=[r.welfare for r in congested],
        baseline=[float(r.paired_welfare) for r in congested],
    )


def summarize(records: Sequence[PeriodRecord], capacity: Optional[float] = None) -> Dict[str, Any]:
    if not records:
        return {"periods": 0}
    cap = np.array([capacity if capacity is not None else r.capacity for r in records])
    realized = np.array([r.realized_power for r in records])
    cleared = np.array([r.cleared_power for r in records])
    overshoot = np.maximum(realized - cap, 0.0) / cap * 100.0
    return {
        "periods": len(records),
        "congested_periods": int(sum(r.clearing.congested for r in records)),
        "capped_fraction": float(np.mean(realized <= cap + CAPPED_TOL)),
        "max_overshoot_pct": float(overshoot.max()),
        "mean_abs_cleared_minus_realized_kw": float(np.mean(np.abs(cleared - realized))),
        "max_abs_cleared_minus_realized_kw": float(np.max(np.abs(cleared - realized))),
        "max_realized_kw": float(realized.max()),
        "capacity_kw": float(cap.max()),
        "mean_price": float(np.mean([r.clearing.price for r in records])),
        "total_welfare": float(sum(r.welfare for r in records)),
    }


def _influence_trial(config: ScenarioConfig, n: int, seed: int) -> float:
    population = synthesize_population(n, seed, config.period_hours, config.deadband, config.k_max)
    weather = ingest_weather(config.weather_path)
    prices = ingest_prices(config.price_path)
    stats = PriceHistory.from_base_prices(prices.prices, config.price_window).stats
    zeta = weather.at(INFLUENCE_MINUTE, wrap=True)
    bids = []
    for h in population:
        params = h.building.etp_params(zeta[0], zeta[1], config.deadband, config.period_hours)
        bids.append(realistic_bid(h.init_state, params, h.prefs, stats, h.building.rated_power, h.load_id))

    capacity = config.capacity_fraction * aggregate_rated_power(population)
    floor = min(b.price for b in bids) - 1.0
    cost = CostModel.at_base_price(floor)

    def clearing_price(candidate: Sequence[Bid]) -> float:
        return clear(build_demand_curve(candidate, 0.0), floor, cost, capacity, config.period_hours).price

    reference = clearing_price(bids)
    if reference == 0.0:
        raise InvalidParameters(f"clearing price is zero for n={n}, seed={seed}; no relative change exists")
    rng = np.random.default_rng(seed)
    j = int(rng.integers(n))
    prefs = population[j].prefs
    low = bid_price_from_curve(prefs.t_min, prefs, stats)
    high = bid_price_from_curve(prefs.t_max, prefs, stats)
    change = 0.0
    for price in np.linspace(low, high, INFLUENCE_STEPS):
        moved = list(bids)
        moved[j] = Bid(float(price), bids[j].quantity, bids[j].load_id)
        change = max(change, abs(clearing_price(moved) - reference) / abs(reference) * 100.0)
    return change


def influence_index(
    config: ScenarioConfig,
    population_sizes: Sequence[int],
    n_seeds: int = 1,
    n_jobs: int = 1,
) -> List[Tuple[int, float]]:
    """Largest percentage price move one household can cause, averaged over seeds.

    Each trial clears one congested afternoon period with capacity at a fixed
    share of the aggregate rated power and a marginal cost below every bid.
    """
    results = []
    for n in population_sizes:
        seeds = [config.seed + s for s in range(n_seeds)]
        if n_jobs == 1:
            trials = [_influence_trial(config, n, s) for s in seeds]
        else:
            trials = Parallel(n_jobs=n_jobs)(delayed(_influence_trial)(config, n, s) for s in seeds)
        results.append((n, float(np.mean(trials))))
        logger.info(f"influence index at n={n}: {results[-1][1]:.4f}%")
    return results
