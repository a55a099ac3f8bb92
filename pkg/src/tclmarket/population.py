"""Synthetic household populations and the population CSV file."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np
import pandas as pd

from tclmarket.agent import DEFAULT_K_MAX, QuadraticValuation, UserPrefs
from tclmarket.errors import InvalidParameters, SchemaError
from tclmarket.thermal import (
    BTU_PER_KWH,
    DEFAULT_DEADBAND,
    DEFAULT_PERIOD,
    BuildingParams,
    HybridState,
)

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 1000
DESIGN_TEMP_RISE = 30.0  # °F between design outdoor and indoor temperature
DESIGN_SOLAR_GAIN = 3000.0  # Btu/h
DESIGN_OUTDOOR = 100.0  # °F

# Uniform draw ranges.
CA_RANGE = (600.0, 1200.0)
CM_RANGE = (3000.0, 8000.0)
UA_RANGE = (300.0, 600.0)
HM_RANGE = (3000.0, 6000.0)
OVERSIZE_RANGE = (1.1, 1.4)
COP_RANGE = (3.0, 4.0)
INTERNAL_GAIN_RANGE = (1000.0, 3000.0)
SOLAR_AIR_FRACTION_RANGE = (0.4, 0.7)
T_DESIRED_RANGE = (70.0, 76.0)
BAND_HALF_WIDTH_RANGE = (2.0, 4.0)
K_SLIDER_RANGE = (0.5, 2.0)
VALUATION_SLOPE_RANGE = (0.3, 0.8)  # $/kWh
VALUATION_CURVATURE_RANGE = (0.2, 0.6)  # $/kWh², negated

POPULATION_COLUMNS = [
    "load_id",
    "ca",
    "cm",
    "ua",
    "hm",
    "cooling_capacity",
    "internal_gain",
    "solar_air_fraction",
    "rated_power",
    "t_min",
    "t_desired",
    "t_max",
    "k_slider",
    "v_curvature",
    "v_slope",
    "init_air_F",
    "init_mass_F",
    "init_on",
]


@dataclass(frozen=True, eq=False)
class Household:
    load_id: str
    building: BuildingParams
    prefs: UserPrefs
    valuation: QuadraticValuation
    init_state: HybridState


def _draw_household(
    rng: np.random.Generator, load_id: str, period: float, deadband: float, k_max: float
) -> Household:
    def u(bounds):
        return float(rng.uniform(*bounds))

    ua = u(UA_RANGE)
    internal_gain = u(INTERNAL_GAIN_RANGE)
    cooling_capacity = u(OVERSIZE_RANGE) * (
        ua * DESIGN_TEMP_RISE + internal_gain + DESIGN_SOLAR_GAIN
    )
    rated_power = cooling_capacity / (BTU_PER_KWH * u(COP_RANGE))
    building = BuildingParams(
        ca=u(CA_RANGE),
        cm=u(CM_RANGE),
        ua=ua,
        hm=u(HM_RANGE),
        cooling_capacity=cooling_capacity,
        internal_gain=internal_gain,
        solar_air_fraction=u(SOLAR_AIR_FRACTION_RANGE),
        rated_power=rated_power,
    )
    t_desired = u(T_DESIRED_RANGE)
    prefs = UserPrefs(
        t_min=t_desired - u(BAND_HALF_WIDTH_RANGE),
        t_desired=t_desired,
        t_max=t_desired + u(BAND_HALF_WIDTH_RANGE),
        k_slider=u(K_SLIDER_RANGE),
        k_max=k_max,
    )
    valuation = QuadraticValuation(
        curvature=-u(VALUATION_CURVATURE_RANGE),
        slope=u(VALUATION_SLOPE_RANGE),
        a_max=rated_power * period,
    )
    air = t_desired + u((-deadband / 2.0, deadband / 2.0))
    init_state = HybridState(np.array([air, air + u((-0.5, 0.5))]), bool(rng.random() < 0.5))

    # The unit must be able to pull the house below the comfort band on a design day.
    design = building.etp_params(DESIGN_OUTDOOR, DESIGN_SOLAR_GAIN, deadband, period)
    if design.equilibrium(True)[0] >= prefs.t_min - deadband:
        raise InvalidParameters(f"household {load_id} is undersized for the design day")
    return Household(load_id, building, prefs, valuation, init_state)


def synthesize_population(
    n: int,
    seed: int,
    period: float = DEFAULT_PERIOD,
    deadband: float = DEFAULT_DEADBAND,
    k_max: float = DEFAULT_K_MAX,
) -> List[Household]:
    """Draw ``n`` households; the same seed always gives the same population."""
    if n < 1:
        raise InvalidParameters(f"a population needs at least one household, got {n}")
    rng = np.random.default_rng(seed)
    households = []
    for i in range(n):
        load_id = f"h{i:04d}"
        for attempt in range(1, MAX_ATTEMPTS + 1):
            try:
                households.append(_draw_household(rng, load_id, period, deadband, k_max))
                break
            except InvalidParameters as e:
                logger.debug(f"resampling {load_id} (attempt {attempt}): {e}")
        else:
            raise InvalidParameters(f"could not draw a valid {load_id} in {MAX_ATTEMPTS} attempts")
    logger.info(f"synthesized {n} households with seed {seed}")
    return households


def aggregate_rated_power(population: Sequence[Household]) -> float:
    return float(sum(h.building.rated_power for h in population))


def population_frame(population: Sequence[Household]) -> pd.DataFrame:
    rows = []
    for h in population:
        b, p, v, s = h.building, h.prefs, h.valuation, h.init_state
        rows.append(
            {
                "load_id": h.load_id,
                "ca": b.ca,
                "cm": b.cm,
                "ua": b.ua,
                "hm": b.hm,
                "cooling_capacity": b.cooling_capacity,
                "internal_gain": b.internal_gain,
                "solar_air_fraction": b.solar_air_fraction,
                "rated_power": b.rated_power,
                "t_min": p.t_min,
                "t_desired": p.t_desired,
                "t_max": p.t_max,
                "k_slider": p.k_slider,
                "v_curvature": v.curvature,
                "v_slope": v.slope,
                "init_air_F": float(s.eta[0]),
                "init_mass_F": float(s.eta[1]),
                "init_on": bool(s.on),
            }
        )
    return pd.DataFrame(rows, columns=POPULATION_COLUMNS)


def save_population(population: Sequence[Household], path: Path) -> None:
    population_frame(population).to_csv(path, index=False, float_format="%.17g")


def load_population(
    path: Path, period: float = DEFAULT_PERIOD, k_max: float = DEFAULT_K_MAX
) -> List[Household]:
    frame = pd.read_csv(path, dtype={"load_id": str}, float_precision="round_trip")
    missing = set(POPULATION_COLUMNS) - set(frame.columns)
    if missing:
        raise SchemaError(f"{path} is missing population columns: {sorted(missing)}")
    households = []
    for row in frame.itertuples(index=False):
        building = BuildingParams(
            ca=row.ca,
            cm=row.cm,
            ua=row.ua,
            hm=row.hm,
            cooling_capacity=row.cooling_capacity,
            internal_gain=row.internal_gain,
            solar_air_fraction=row.solar_air_fraction,
            rated_power=row.rated_power,
        )
        households.append(
            Household(
                load_id=str(row.load_id),
                building=building,
                prefs=UserPrefs(row.t_min, row.t_desired, row.t_max, row.k_slider, k_max),
                valuation=QuadraticValuation(row.v_curvature, row.v_slope, row.rated_power * period),
                init_state=HybridState(
                    np.array([row.init_air_F, row.init_mass_F]),
                    str(row.init_on).strip().lower() in ("true", "1"),
                ),
            )
        )
    return households
