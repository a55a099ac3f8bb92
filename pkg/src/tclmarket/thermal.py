"""Second-order ETP load dynamics and hysteretic thermostat control.

The air temperature is the first state component and the mass temperature the
second. All times are in hours and temperatures in degrees Fahrenheit. Within a
market period the drive vectors are constant, so each mode has the closed-form
trajectory

    eta(t) = eq + expm(A t) (eta(0) - eq),   eq = -inv(A) b

and deadband crossings are roots of its first component.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, optimize

from tclmarket.errors import InvalidParameters, NonConvergence

logger = logging.getLogger(__name__)

DEFAULT_DEADBAND = 1.0  # °F
DEFAULT_PERIOD = 1.0 / 12.0  # hours (5 minutes)
EIGEN_GAP_TOL = 1e-8
CROSSING_XTOL = 1e-9  # hours
SCAN_RESOLUTION = 256  # scan points per market period
MAX_SWITCHES = 10_000
BTU_PER_KWH = 3412.1416


@dataclass(frozen=True, eq=False)
class EtpParams:
    """Per-load ETP model for one market period (A in 1/h, drives in °F/h)."""

    a_matrix: np.ndarray
    b_on: np.ndarray
    b_off: np.ndarray
    deadband: float = DEFAULT_DEADBAND
    rated_power: float = 5.0
    period: float = DEFAULT_PERIOD

    def __post_init__(self) -> None:
        a = np.array(self.a_matrix, dtype=float).reshape(2, 2)
        b_on = np.array(self.b_on, dtype=float).reshape(2)
        b_off = np.array(self.b_off, dtype=float).reshape(2)
        object.__setattr__(self, "a_matrix", a)
        object.__setattr__(self, "b_on", b_on)
        object.__setattr__(self, "b_off", b_off)

        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b_on)) and np.all(np.isfinite(b_off))):
            raise InvalidParameters("ETP matrices must be finite")
        if abs(np.linalg.det(a)) <= 1e-12 * max(1.0, float(np.abs(a).max()) ** 2):
            raise InvalidParameters(f"ETP system matrix is singular: {a.tolist()}")
        if np.any(np.linalg.eigvals(a).real >= 0.0):
            raise InvalidParameters(f"ETP system matrix is not Hurwitz: {a.tolist()}")
        if self.deadband <= 0:
            raise InvalidParameters(f"deadband must be positive, got {self.deadband}")
        if self.rated_power <= 0:
            raise InvalidParameters(f"rated_power must be positive, got {self.rated_power}")
        if self.period <= 0:
            raise InvalidParameters(f"period must be positive, got {self.period}")

    @property
    def e_max(self) -> float:
        """Energy in kWh drawn when the load is on for the whole period."""
        return self.rated_power * self.period

    def drive(self, on: bool) -> np.ndarray:
        return self.b_on if on else self.b_off

    def equilibrium(self, on: bool) -> np.ndarray:
        """Fixed point of the given mode, -inv(A) b."""
        return np.linalg.solve(self.a_matrix, -self.drive(on))

    @cached_property
    def _modes(self) -> Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        # None marks a near-defective A; callers then fall back to scipy's expm.
        eigvals, vecs = np.linalg.eig(self.a_matrix)
        scale = max(1.0, float(np.abs(eigvals).max()))
        if abs(eigvals[0] - eigvals[1]) < EIGEN_GAP_TOL * scale:
            return None
        return eigvals, vecs, np.linalg.inv(vecs)

    def expm(self, dt: float) -> np.ndarray:
        """Matrix exponential expm(A dt)."""
        modes = self._modes
        if modes is None:
            return linalg.expm(self.a_matrix * dt)
        eigvals, vecs, inv_vecs = modes
        return np.real(vecs @ np.diag(np.exp(eigvals * dt)) @ inv_vecs)


@dataclass(frozen=True, eq=False)
class HybridState:
    """Continuous temperatures plus the relay state (True = consuming power)."""

    eta: np.ndarray
    on: bool

    def __post_init__(self) -> None:
        eta = np.array(self.eta, dtype=float).reshape(2)
        if not np.all(np.isfinite(eta)):
            raise InvalidParameters(f"temperatures must be finite, got {eta.tolist()}")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "on", bool(self.on))

    @property
    def t_c(self) -> float:
        """Observable air temperature."""
        return float(self.eta[0])


@dataclass(frozen=True)
class EnergyFn:
    """Setpoint-to-energy map of one load over one market period."""

    e_max: float
    t_f: float
    samples: List[Tuple[float, float]] = field(default_factory=list)

    @property
    def setpoints(self) -> np.ndarray:
        return np.array([u for u, _ in self.samples])

    @property
    def energies(self) -> np.ndarray:
        return np.array([e for _, e in self.samples])


@dataclass(frozen=True)
class BuildingParams:
    """Physical ETP coefficients of one house.

    Capacities are in Btu/°F, conductances in Btu/(h·°F) and gains in Btu/h.
    Outdoor conditions enter through ``etp_params``; they are held constant
    over one market period.
    """

    ca: float
    cm: float
    ua: float
    hm: float
    cooling_capacity: float
    internal_gain: float = 0.0
    solar_air_fraction: float = 0.5
    rated_power: float = 5.0

    def __post_init__(self) -> None:
        for name in ("ca", "cm", "ua", "hm", "cooling_capacity", "rated_power"):
            if getattr(self, name) <= 0:
                raise InvalidParameters(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.solar_air_fraction <= 1.0:
            raise InvalidParameters("solar_air_fraction must lie in [0, 1]")

    @property
    def a_matrix(self) -> np.ndarray:
        return np.array(
            [
                [-(self.ua + self.hm) / self.ca, self.hm / self.ca],
                [self.hm / self.cm, -self.hm / self.cm],
            ]
        )

    @property
    def exog_matrix(self) -> np.ndarray:
        """Maps (outdoor °F, solar gain Btu/h) to a drive in °F/h."""
        f = self.solar_air_fraction
        return np.array(
            [
                [self.ua / self.ca, f / self.ca],
                [0.0, (1.0 - f) / self.cm],
            ]
        )

    def mode_drive(self, on: bool) -> np.ndarray:
        """Weather-independent part of the drive for one relay state."""
        heat = self.internal_gain - (self.cooling_capacity if on else 0.0)
        return np.array([heat / self.ca, 0.0])

    def etp_params(
        self,
        outdoor_f: float,
        solar_gain: float,
        deadband: float = DEFAULT_DEADBAND,
        period: float = DEFAULT_PERIOD,
    ) -> EtpParams:
        exog = self.exog_matrix @ np.array([outdoor_f, solar_gain])
        return EtpParams(
            a_matrix=self.a_matrix,
            b_on=exog + self.mode_drive(True),
            b_off=exog + self.mode_drive(False),
            deadband=deadband,
            rated_power=self.rated_power,
            period=period,
        )


def propagate(state: HybridState, params: EtpParams, dt: float) -> np.ndarray:
    """Closed-form temperatures after ``dt`` hours in the current relay state."""
    if dt < 0:
        raise ValueError(f"dt must be non-negative, got {dt}")
    if dt == 0:
        return state.eta.copy()
    eq = params.equilibrium(state.on)
    return eq + params.expm(dt) @ (state.eta - eq)


def _air_trajectory(state: HybridState, params: EtpParams, times: np.ndarray) -> np.ndarray:
    """Air temperature at each of ``times`` without switching."""
    eq = params.equilibrium(state.on)
    deviation = state.eta - eq
    modes = params._modes
    if modes is None:
        return np.array([eq[0] + (params.expm(float(t)) @ deviation)[0] for t in times])
    eigvals, vecs, inv_vecs = modes
    weights = vecs[0] * (inv_vecs @ deviation)
    return eq[0] + np.real(weights @ np.exp(np.outer(eigvals, times)))


def hysteresis_step(state: HybridState, setpoint: float, params: EtpParams) -> HybridState:
    """Apply the cooling-mode deadband rule to the relay state."""
    half = params.deadband / 2.0
    if state.t_c >= setpoint + half:
        on = True
    elif state.t_c <= setpoint - half:
        on = False
    else:
        on = state.on
    return HybridState(state.eta.copy(), on)


def _first_crossing(
    state: HybridState, params: EtpParams, boundary: float, horizon: float
) -> Optional[float]:
    """Time until the air temperature reaches the switching boundary, or None."""
    sign = 1.0 if state.on else -1.0

    def gap(t: float) -> float:
        return sign * (float(_air_trajectory(state, params, np.array([t]))[0]) - boundary)

    n_points = max(2, int(math.ceil(SCAN_RESOLUTION * horizon / params.period)))
    times = np.linspace(0.0, horizon, n_points + 1)
    gaps = sign * (_air_trajectory(state, params, times) - boundary)
    hits = np.flatnonzero(gaps <= 0.0)
    if hits.size == 0:
        return None
    idx = int(hits[0])
    if idx == 0 or gaps[idx] == 0.0:
        return float(times[idx])
    try:
        return float(optimize.bisect(gap, times[idx - 1], times[idx], xtol=CROSSING_XTOL))
    except (ValueError, RuntimeError) as e:
        raise NonConvergence(
            f"deadband crossing at {boundary:.4f} °F not bracketed in "
            f"[{times[idx - 1]:.6g}, {times[idx]:.6g}] h: {e}"
        ) from e


@dataclass(frozen=True, eq=False)
class _Segment:
    start: float
    end: float
    state: HybridState


def _hybrid_segments(
    state: HybridState, setpoint: float, params: EtpParams
) -> Tuple[List[_Segment], HybridState]:
    current = hysteresis_step(state, setpoint, params)
    half = params.deadband / 2.0
    segments: List[_Segment] = []
    t = 0.0
    for _ in range(MAX_SWITCHES):
        remaining = params.period - t
        boundary = setpoint - half if current.on else setpoint + half
        crossing = _first_crossing(current, params, boundary, remaining)
        if crossing is None or crossing >= remaining:
            segments.append(_Segment(t, params.period, current))
            return segments, HybridState(propagate(current, params, remaining), current.on)
        segments.append(_Segment(t, t + crossing, current))
        eta = propagate(current, params, crossing)
        t += crossing
        current = HybridState(eta, not current.on)
    raise NonConvergence(f"more than {MAX_SWITCHES} relay switches in one period")


def simulate_period(
    state: HybridState, setpoint: float, params: EtpParams
) -> Tuple[HybridState, float, float]:
    """Advance one market period under a fixed setpoint.

    Returns the end-of-period state, the energy drawn in kWh and the fraction
    of the period the relay was on.
    """
    segments, final = _hybrid_segments(state, setpoint, params)
    on_fraction = _on_fraction(segments, params)
    energy = params.rated_power * params.period * on_fraction
    logger.debug(
        f"period at setpoint {setpoint:.3f}: {len(segments) - 1} switches, on {on_fraction:.4f}"
    )
    return final, energy, on_fraction


def _on_fraction(segments: Sequence[_Segment], params: EtpParams) -> float:
    on_time = sum(seg.end - seg.start for seg in segments if seg.state.on)
    return min(1.0, max(0.0, on_time / params.period))


def sample_period(
    state: HybridState, setpoint: float, params: EtpParams, n_samples: int
) -> Tuple[np.ndarray, np.ndarray, HybridState, float]:
    """Sample air temperature and relay state at ``n_samples`` equally spaced instants.

    Sample j is taken at j * period / n_samples, so the first sample is the
    period start and the period end is left to the next call. The energy drawn
    over the period is returned last.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    segments, final = _hybrid_segments(state, setpoint, params)
    energy = params.rated_power * params.period * _on_fraction(segments, params)
    times = np.arange(n_samples) * params.period / n_samples
    temps = np.empty(n_samples)
    modes = np.empty(n_samples, dtype=bool)
    for j, t in enumerate(times):
        seg = next(s for s in segments if s.start <= t < s.end or s is segments[-1])
        temps[j] = propagate(seg.state, params, float(t - seg.start))[0]
        modes[j] = seg.state.on
    return temps, modes, final, energy


def final_temp_if_on(
    state: HybridState, params: EtpParams, horizon: Optional[float] = None
) -> float:
    """Air temperature at the end of the period if the load stays on throughout."""
    horizon = params.period if horizon is None else horizon
    return float(propagate(HybridState(state.eta, True), params, horizon)[0])


def _refined_extremum(
    state: HybridState, params: EtpParams, times: np.ndarray, air: np.ndarray, idx: int, sign: float
) -> float:
    """Polish a scanned minimum (sign 1) or maximum (sign -1) that lies inside the horizon."""
    if idx == 0 or idx == len(times) - 1:
        return float(air[idx])
    result = optimize.minimize_scalar(
        lambda t: sign * float(_air_trajectory(state, params, np.array([t]))[0]),
        bounds=(float(times[idx - 1]), float(times[idx + 1])),
        method="bounded",
        options={"xatol": CROSSING_XTOL},
    )
    return sign * float(result.fun)


def air_extremes(
    state: HybridState, params: EtpParams, on: bool, horizon: Optional[float] = None
) -> Tuple[float, float]:
    """Minimum and maximum air temperature over the horizon with the relay held.

    Both endpoints are included exactly, and an extremum strictly inside the
    horizon is polished beyond the scan grid.
    """
    horizon = params.period if horizon is None else horizon
    if horizon == 0:
        return state.t_c, state.t_c
    held = HybridState(state.eta, on)
    times = np.linspace(0.0, horizon, SCAN_RESOLUTION + 1)
    air = _air_trajectory(held, params, times)
    end = float(propagate(held, params, horizon)[0])
    low = min(
        float(air.min()),
        state.t_c,
        end,
        _refined_extremum(held, params, times, air, int(np.argmin(air)), 1.0),
    )
    high = max(
        float(air.max()),
        state.t_c,
        end,
        _refined_extremum(held, params, times, air, int(np.argmax(air)), -1.0),
    )
    return low, high


def transition_setpoints(
    state: HybridState, params: EtpParams, horizon: Optional[float] = None
) -> Tuple[float, float]:
    """Setpoints u1 >= u2 around the partial-energy region of one period.

    Above u1 the load is off for the whole period and below u2 it is on for
    the whole period. A load that is on and gets switched off can still drift
    back past u + δ/2, so its u1 also looks at the off-mode maximum.
    """
    half = params.deadband / 2.0
    _, off_high = air_extremes(state, params, on=False, horizon=horizon)
    on_low, _ = air_extremes(state, params, on=True, horizon=horizon)
    if state.on:
        return max(state.t_c + half, off_high - half), on_low + half
    u1 = off_high - half
    return u1, min(state.t_c - half, on_low + half, u1)


def energy_function(
    state: HybridState, params: EtpParams, setpoint_grid: Sequence[float]
) -> EnergyFn:
    """Energy drawn over one period at each setpoint of an ascending grid."""
    grid = [float(u) for u in setpoint_grid]
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise InvalidParameters("setpoint_grid must be sorted ascending")

    t_f = final_temp_if_on(state, params)
    zero_above, full_below = transition_setpoints(state, params)

    samples = []
    for u in grid:
        if u < full_below:
            energy = params.e_max
        elif u > zero_above:
            energy = 0.0
        else:
            _, energy, _ = simulate_period(state, u, params)
        samples.append((u, float(energy)))
    return EnergyFn(e_max=params.e_max, t_f=t_f, samples=samples)
