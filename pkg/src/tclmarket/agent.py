"""Household preferences, bidding curve, price response and two-scalar bids."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Deque, Iterable, Optional, Tuple

import numpy as np

from tclmarket.errors import DegeneratePrefs, InvalidParameters
from tclmarket.thermal import EtpParams, HybridState, transition_setpoints

logger = logging.getLogger(__name__)

DEFAULT_K_SLIDER = 1.0
DEFAULT_K_MAX = 3.0
DEFAULT_PRICE_WINDOW = 288  # 24 h of 5-minute periods
SETPOINT_MARGIN = 1e-6  # °F between a step response and u1 or u2


@dataclass(frozen=True)
class UserPrefs:
    """Comfort band and thermostat slider of one household (°F)."""

    t_min: float
    t_desired: float
    t_max: float
    k_slider: float = DEFAULT_K_SLIDER
    k_max: float = DEFAULT_K_MAX

    def __post_init__(self) -> None:
        if not self.t_min <= self.t_desired <= self.t_max:
            raise InvalidParameters(
                f"need t_min <= t_desired <= t_max, got "
                f"({self.t_min}, {self.t_desired}, {self.t_max})"
            )
        if not 0.0 <= self.k_slider <= self.k_max:
            raise InvalidParameters(f"k_slider must lie in [0, {self.k_max}], got {self.k_slider}")


@dataclass(frozen=True)
class PriceStats:
    """Rolling clearing-price statistics in $/kWh."""

    p_avg: float
    p_sigma: float
    window: int = DEFAULT_PRICE_WINDOW

    def __post_init__(self) -> None:
        if self.p_sigma < 0:
            raise InvalidParameters(f"p_sigma must be non-negative, got {self.p_sigma}")
        if self.window < 1:
            raise InvalidParameters(f"window must be at least 1, got {self.window}")


class PriceHistory:
    """Clearing-price history feeding the bidding curve.

    Until ``window`` prices have been recorded the seed statistics (normally
    the first day's base-price mean and deviation) are reported.
    """

    def __init__(self, seed: PriceStats, window: Optional[int] = None):
        self.seed = seed
        self.window = window or seed.window
        self._prices: Deque[float] = deque(maxlen=self.window)

    @classmethod
    def from_base_prices(cls, base_prices: Iterable[float], window: int = DEFAULT_PRICE_WINDOW) -> "PriceHistory":
        prices = np.asarray(list(base_prices), dtype=float)[:window]
        seed = PriceStats(float(prices.mean()), float(prices.std()), window)
        return cls(seed, window)

    def push(self, price: float) -> None:
        self._prices.append(float(price))

    def __len__(self) -> int:
        return len(self._prices)

    @property
    def stats(self) -> PriceStats:
        if len(self._prices) < self.window:
            return self.seed
        prices = np.fromiter(self._prices, dtype=float)
        return PriceStats(float(prices.mean()), float(prices.std()), self.window)


@dataclass(frozen=True)
class Bid:
    """Two-scalar market message: price in $/kWh and quantity in kW."""

    price: float
    quantity: float
    load_id: str

    def __post_init__(self) -> None:
        if not np.isfinite(self.price):
            raise InvalidParameters(f"bid price must be finite for {self.load_id}")
        if self.quantity < 0:
            raise InvalidParameters(f"bid quantity must be non-negative for {self.load_id}")


@dataclass(frozen=True)
class QuadraticValuation:
    """Comfort value V(a) = slope * a + curvature * a**2 / 2 on [0, a_max] kWh.

    A zero curvature gives the linear valuations of the non-realizable
    two-user fixture; every market test population is strictly concave.
    """

    curvature: float
    slope: float
    a_max: float

    def __post_init__(self) -> None:
        if self.curvature > 0:
            raise InvalidParameters(f"curvature must be <= 0, got {self.curvature}")
        if self.slope <= 0:
            raise InvalidParameters(f"slope must be positive, got {self.slope}")
        if self.a_max < 0:
            raise InvalidParameters(f"a_max must be non-negative, got {self.a_max}")

    @property
    def is_linear(self) -> bool:
        return self.curvature == 0

    def value(self, a: float) -> float:
        return self.slope * a + 0.5 * self.curvature * a * a

    def marginal(self, a: float) -> float:
        return self.slope + self.curvature * a

    def breakpoints(self) -> Tuple[float, ...]:
        """Prices where the response leaves a_max and reaches zero."""
        if self.is_linear:
            return (self.slope,)
        return (self.slope + self.curvature * self.a_max, self.slope)


def bid_price_from_curve(t_c: float, prefs: UserPrefs, stats: PriceStats) -> float:
    """Price on the bidding curve for a measured (or target) temperature."""
    if prefs.t_max == prefs.t_min:
        raise DegeneratePrefs(f"zero-width comfort band at {prefs.t_min} °F")
    spread = prefs.k_slider * stats.p_sigma
    if t_c >= prefs.t_desired:
        if t_c >= prefs.t_max:
            return stats.p_avg + spread
        return stats.p_avg + spread * (t_c - prefs.t_desired) / (prefs.t_max - prefs.t_desired)
    if t_c <= prefs.t_min:
        return stats.p_avg - spread
    return stats.p_avg - spread * (prefs.t_desired - t_c) / (prefs.t_desired - prefs.t_min)


def setpoint_from_price(p_c: float, prefs: UserPrefs, stats: PriceStats) -> float:
    """Thermostat setpoint chosen in response to the clearing price."""
    spread = prefs.k_slider * stats.p_sigma
    if p_c == stats.p_avg:
        return prefs.t_desired
    if p_c > stats.p_avg:
        if spread == 0 or p_c >= stats.p_avg + spread:
            return prefs.t_max
        return prefs.t_desired + (prefs.t_max - prefs.t_desired) * (p_c - stats.p_avg) / spread
    if spread == 0 or p_c <= stats.p_avg - spread:
        return prefs.t_min
    return prefs.t_desired - (prefs.t_desired - prefs.t_min) * (stats.p_avg - p_c) / spread


def setpoint_on_step(
    p_c: float, bid_price: float, u1: float, u2: float, prefs: UserPrefs, stats: PriceStats
) -> float:
    """Price response held to the step the market cleared.

    A load served at ``p_c`` (bid strictly above it) keeps its setpoint below
    u2 and runs the whole period. Any other load keeps it above u1 and stays
    off, so realized energy matches the cleared allocation.
    """
    setpoint = setpoint_from_price(p_c, prefs, stats)
    if bid_price > p_c:
        return min(setpoint, u2 - SETPOINT_MARGIN)
    return max(setpoint, u1 + SETPOINT_MARGIN)


def compute_u1_u2(
    state: HybridState, params: EtpParams, horizon: Optional[float] = None
) -> Tuple[float, float]:
    """Setpoints bounding the transition region of the energy function.

    Above u1 the load draws nothing this period; below u2 it stays on for the
    whole period. For a load that is on, u2 = T_f + δ/2 whenever the on
    trajectory falls monotonically, and u1 = T_c + δ/2 unless the off drift
    would climb back past the upper edge within the period.
    """
    return transition_setpoints(state, params, horizon)


def realistic_bid(
    state: HybridState,
    params: EtpParams,
    prefs: UserPrefs,
    stats: PriceStats,
    q_measured: float,
    load_id: str = "0",
) -> Bid:
    """Step approximation of the energy response: price midway between the u1 and u2 prices."""
    u1, u2 = compute_u1_u2(state, params)
    return bid_from_setpoints(u1, u2, prefs, stats, q_measured, load_id)


def bid_from_setpoints(
    u1: float, u2: float, prefs: UserPrefs, stats: PriceStats, q_measured: float, load_id: str
) -> Bid:
    p1 = bid_price_from_curve(u1, prefs, stats)
    p2 = bid_price_from_curve(u2, prefs, stats)
    return Bid(price=0.5 * (p1 + p2), quantity=q_measured, load_id=load_id)


def temperature_bid(
    state: HybridState, prefs: UserPrefs, stats: PriceStats, q_measured: float, load_id: str = "0"
) -> Bid:
    """Bid that only looks at the current room temperature."""
    return Bid(bid_price_from_curve(state.t_c, prefs, stats), q_measured, load_id)


def optimal_allocation(v: QuadraticValuation, p_c: float) -> float:
    """Best response argmax over [0, a_max] of V(a) - p_c * a."""
    if v.is_linear:
        return v.a_max if p_c < v.slope else 0.0
    return float(min(max((v.slope - p_c) / -v.curvature, 0.0), v.a_max))
