"""Weather and price ingestion, measurement logs, and result files."""

import json
import logging
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml

from tclmarket.errors import DataGap, SchemaError
from tclmarket.estimation import MeasurementLog, UncertainModel

logger = logging.getLogger(__name__)

WEATHER_COLUMNS = ["timestamp_iso", "outdoor_F", "solar_gain_btu_per_h"]
PRICE_COLUMNS = ["timestamp_iso", "base_price_usd_per_kwh"]
LOG_COLUMNS = ["minute_index", "temp_F", "mode_on", "outdoor_F", "solar_gain"]
PERIOD_COLUMNS = ["period", "price", "p_bar", "p_star", "congested", "cleared_kw", "realized_kw", "welfare"]
PRICE_CADENCE = timedelta(minutes=5)


@dataclass(frozen=True, eq=False)
class WeatherSeries:
    """Outdoor temperature (°F) and solar gain (Btu/h) at 1-minute cadence."""

    start: datetime
    outdoor: np.ndarray
    solar: np.ndarray

    def __len__(self) -> int:
        return len(self.outdoor)

    def timestamp(self, minute: int) -> datetime:
        return self.start + timedelta(minutes=minute)

    def at(self, minute: int, wrap: bool = False) -> Tuple[float, float]:
        if wrap:
            minute %= len(self)
        if not 0 <= minute < len(self):
            raise DataGap(f"no weather at {self.timestamp(minute).isoformat()}", self.timestamp(minute))
        return float(self.outdoor[minute]), float(self.solar[minute])


@dataclass(frozen=True, eq=False)
class PriceSeries:
    """Base prices in $/kWh at 5-minute cadence."""

    start: datetime
    prices: np.ndarray

    def __len__(self) -> int:
        return len(self.prices)

    def timestamp(self, index: int) -> datetime:
        return self.start + index * PRICE_CADENCE

    def at_minute(self, minute: int) -> float:
        index = minute // 5
        if not 0 <= index < len(self):
            raise DataGap(f"no base price at {self.timestamp(index).isoformat()}", self.timestamp(index))
        return float(self.prices[index])


def _read_series(path: Path, columns: List[str]) -> Tuple[pd.DatetimeIndex, pd.DataFrame]:
    path = Path(path)
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError as e:
        raise SchemaError(f"{path} is empty") from e
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path} is missing columns {missing}")
    if len(frame) < 2:
        raise SchemaError(f"{path} needs at least two rows")
    try:
        stamps = pd.DatetimeIndex(pd.to_datetime(frame["timestamp_iso"]))
    except (ValueError, TypeError) as e:
        raise SchemaError(f"{path} has unparseable timestamps: {e}") from e
    values = frame[columns[1:]].apply(pd.to_numeric, errors="coerce")
    if values.isna().any().any():
        bad = frame["timestamp_iso"][values.isna().any(axis=1)].iloc[0]
        raise SchemaError(f"{path} has a missing or non-numeric value at {bad}")
    return stamps, values


def _check_cadence(path: Path, stamps: pd.DatetimeIndex, step: pd.Timedelta) -> None:
    if step <= pd.Timedelta(0):
        raise SchemaError(f"{path} timestamps must increase")
    steps = stamps[1:] - stamps[:-1]
    irregular = np.flatnonzero(steps != step)
    if irregular.size:
        after = stamps[irregular[0]]
        missing = after + step
        raise DataGap(
            f"{path}: expected a row at {missing.isoformat()} after {after.isoformat()}",
            missing.to_pydatetime(),
        )


def ingest_weather(path: Path) -> WeatherSeries:
    """Read a regular-cadence weather CSV and interpolate it to 1-minute samples."""
    stamps, values = _read_series(path, WEATHER_COLUMNS)
    _check_cadence(path, stamps, stamps[1] - stamps[0])
    minutes = ((stamps - stamps[0]) / pd.Timedelta(minutes=1)).to_numpy(dtype=float)
    grid = np.arange(int(minutes[-1]) + 1, dtype=float)
    outdoor = np.interp(grid, minutes, values["outdoor_F"].to_numpy(dtype=float))
    solar = np.interp(grid, minutes, values["solar_gain_btu_per_h"].to_numpy(dtype=float))
    logger.debug(f"weather {path}: {len(stamps)} rows -> {len(grid)} minutes")
    return WeatherSeries(stamps[0].to_pydatetime(), outdoor, solar)


def ingest_prices(path: Path) -> PriceSeries:
    """Read a 5-minute base price CSV."""
    stamps, values = _read_series(path, PRICE_COLUMNS)
    _check_cadence(path, stamps, pd.Timedelta(PRICE_CADENCE))
    logger.debug(f"prices {path}: {len(stamps)} periods")
    return PriceSeries(stamps[0].to_pydatetime(), values["base_price_usd_per_kwh"].to_numpy(dtype=float))


def write_log(log: MeasurementLog, path: Path) -> None:
    frame = pd.DataFrame(
        {
            "minute_index": np.arange(len(log)),
            "temp_F": log.temps,
            "mode_on": log.modes.astype(int),
            "outdoor_F": log.exog[:, 0],
            "solar_gain": log.exog[:, 1],
        }
    )
    frame.to_csv(path, index=False, float_format="%.17g")


def read_log(path: Path) -> MeasurementLog:
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = [c for c in LOG_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path} is missing columns {missing}")
    frame = frame.sort_values("minute_index")
    return MeasurementLog(
        temps=frame["temp_F"].to_numpy(dtype=float),
        modes=frame["mode_on"].to_numpy(dtype=int) != 0,
        exog=frame[["outdoor_F", "solar_gain"]].to_numpy(dtype=float),
    )


def save_model(model: UncertainModel, path: Path, extra: Optional[Dict[str, Any]] = None) -> None:
    data = {"model": model.to_dict()}
    data.update(extra or {})
    with open(path, "w") as f:
        yaml.safe_dump(data, f, default_flow_style=None, sort_keys=False)


def load_yaml(path: Path) -> Dict[str, Any]:
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise SchemaError(f"{path} must hold a mapping at the top level")
    return data


def load_model(path: Path) -> UncertainModel:
    data = load_yaml(path)
    return UncertainModel.from_dict(data.get("model", data))


def write_periods_csv(rows: Iterable[Dict[str, Any]], path: Path) -> None:
    pd.DataFrame(list(rows), columns=PERIOD_COLUMNS).to_csv(path, index=False, float_format="%.10g")


def write_trajectories_csv(rows: Iterable[Dict[str, Any]], path: Path) -> None:
    pd.DataFrame(list(rows), columns=["period", "series", "value"]).to_csv(
        path, index=False, float_format="%.10g"
    )


def write_json(data: Dict[str, Any], path: Path) -> None:
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=str)


def write_trace_csv(trace: Sequence[float], path: Path) -> None:
    pd.DataFrame({"iteration": np.arange(len(trace)), "loglik": trace}).to_csv(
        path, index=False, float_format="%.17g"
    )
