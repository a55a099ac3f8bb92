"""Configuration management for tclmarket."""

import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional

import yaml
from pydantic import BaseModel, Field, field_validator, model_validator

from tclmarket.errors import SchemaError
from tclmarket.market import CostKind, CostModel

CONFIG_FILENAME = ".tclmarket.yml"
DATA_DIR = Path(__file__).parent / "data"
DEFAULT_WEATHER = DATA_DIR / "weather_hot_day.csv"
MILD_WEATHER = DATA_DIR / "weather_mild_day.csv"
DEFAULT_PRICES = DATA_DIR / "prices_sample_day.csv"


class BiddingMode(str, Enum):
    KNOWN_PARAMS = "known-params"
    OUTPUT_BASED = "output-based"
    PERTURBED = "perturbed"
    TEMPERATURE = "temperature"


class PricingMode(str, Enum):
    MECHANISM = "mechanism"
    RTP = "rtp"
    FIXED_RATIO = "fixed-ratio"


class NoiseKind(str, Enum):
    GAUSSIAN = "gaussian"
    UNIFORM = "uniform"


class CostConfig(BaseModel):
    """Procurement cost of the feeder energy."""

    kind: CostKind = Field(default=CostKind.LINEAR, description="linear or quadratic cost")
    linear: Optional[float] = Field(
        default=None,
        description="Linear coefficient in $/kWh (defaults to each period's base price)",
    )
    quadratic: float = Field(default=0.0, ge=0.0, description="Quadratic coefficient in $/kWh²")

    def model(self, base_price: float) -> CostModel:
        linear = base_price if self.linear is None else self.linear
        return CostModel(self.kind, linear=linear, quadratic=self.quadratic)


class EmSettings(BaseModel):
    """Stopping rules and options of the EM parameter fit."""

    max_iters: int = Field(default=200, ge=1, description="Iteration cap")
    tol: float = Field(default=1e-8, gt=0.0, description="Relative log-likelihood improvement to stop at")
    jitter: float = Field(
        default=1e-9, ge=0.0, description="Relative log-likelihood decrease tolerated as round-off"
    )
    joint_linear_update: bool = Field(
        default=False,
        description="Solve the linear parameters jointly instead of in sequence",
    )
    horizon_steps: int = Field(
        default=5, ge=1, description="Model steps rolled forward to predict one market period"
    )


class ScenarioConfig(BaseModel):
    """One market simulation run."""

    n_households: int = Field(default=100, ge=1, description="Number of responsive households")
    feeder_capacity: Optional[float] = Field(
        default=None,
        gt=0.0,
        description="Feeder capacity in kW (scaled with the population when unset)",
    )
    unresponsive_power: Optional[float] = Field(
        default=None,
        ge=0.0,
        description="Unresponsive load in kW (scaled with the population when unset)",
    )
    unresponsive_per_household: float = Field(
        default=12.0, ge=0.0, description="Unresponsive kW per household when scaling"
    )
    capacity_fraction: float = Field(
        default=0.6,
        gt=0.0,
        description="Share of aggregate rated power added on top of the unresponsive load when scaling",
    )
    period_minutes: int = Field(default=5, ge=1, description="Market period length")
    horizon_hours: float = Field(default=24.0, gt=0.0, description="Simulated horizon")
    weather_path: Path = Field(default=DEFAULT_WEATHER, description="Weather CSV")
    price_path: Path = Field(default=DEFAULT_PRICES, description="Base price CSV")
    seed: int = Field(default=0, ge=0, description="Seed of every random draw in the run")

    bidding_mode: BiddingMode = Field(default=BiddingMode.KNOWN_PARAMS, description="How bids are formed")
    pricing_mode: PricingMode = Field(default=PricingMode.MECHANISM, description="How prices are set")
    perturb_pct: float = Field(
        default=2.0, ge=0.0, description="Bid-price perturbation in percent for perturbed bidding"
    )
    gamma: float = Field(default=1.0, ge=1.0, description="Price ratio of the fixed-ratio baseline")

    deadband: float = Field(default=1.0, gt=0.0, description="Thermostat deadband in °F")
    k_max: float = Field(default=3.0, gt=0.0, description="Upper end of the comfort slider")
    price_window: int = Field(default=288, ge=1, description="Clearing prices in the rolling statistics")
    partial_marginal_service: bool = Field(
        default=False, description="Serve bids exactly at the capacity price fractionally"
    )
    cost: CostConfig = Field(default_factory=CostConfig)

    measurement_noise: float = Field(default=0.05, ge=0.0, description="Thermostat noise std in °F")
    process_noise: float = Field(default=0.01, ge=0.0, description="Per-minute process noise std in °F")
    noise_kind: NoiseKind = Field(default=NoiseKind.GAUSSIAN, description="Noise distribution")
    warmup_hours: float = Field(default=6.0, gt=0.0, description="Measurement history before the horizon")
    refit_every_periods: int = Field(default=12, ge=1, description="Market periods between EM refits")
    init_error: float = Field(default=0.10, ge=0.0, description="Relative error of the initial EM guess")
    em: EmSettings = Field(default_factory=EmSettings)
    n_jobs: int = Field(default=1, description="joblib workers for per-household fits")

    @field_validator("weather_path", "price_path", mode="before")
    @classmethod
    def expand_path(cls, v: Any) -> Path:
        """Expand environment variables and ~ in data paths."""
        return Path(os.path.expandvars(os.path.expanduser(str(v))))

    @model_validator(mode="after")
    def check_capacity(self) -> "ScenarioConfig":
        if (
            self.feeder_capacity is not None
            and self.unresponsive_power is not None
            and self.feeder_capacity <= self.unresponsive_power
        ):
            raise ValueError(
                f"feeder_capacity ({self.feeder_capacity}) must exceed "
                f"unresponsive_power ({self.unresponsive_power})"
            )
        if 60 % self.period_minutes and self.period_minutes % 60:
            raise ValueError("period_minutes must divide an hour or be a whole number of hours")
        return self

    @property
    def period_hours(self) -> float:
        return self.period_minutes / 60.0

    @property
    def n_periods(self) -> int:
        return int(round(self.horizon_hours * 60.0 / self.period_minutes))

    def resolve_unresponsive(self) -> float:
        if self.unresponsive_power is not None:
            return self.unresponsive_power
        return self.unresponsive_per_household * self.n_households

    def resolve_capacity(self, aggregate_rated_power: float) -> float:
        if self.feeder_capacity is not None:
            return self.feeder_capacity
        return self.resolve_unresponsive() + self.capacity_fraction * aggregate_rated_power

    @classmethod
    def from_file(cls, path: Path) -> "ScenarioConfig":
        """Load configuration from YAML file; relative data paths resolve against its folder."""
        path = Path(path)
        if not path.exists():
            return cls()
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise SchemaError(f"{path} must hold a mapping at the top level")
        for key in ("weather_path", "price_path"):
            if key in data:
                candidate = Path(os.path.expandvars(os.path.expanduser(str(data[key]))))
                if not candidate.is_absolute():
                    data[key] = str(path.parent / candidate)
        return cls(**data)

    @classmethod
    def find_config(cls, start_path: Optional[Path] = None) -> "ScenarioConfig":
        """Find and load configuration file from current or parent directories."""
        start = Path(start_path or os.getcwd())

        for path in [start, *start.parents]:
            config_file = path / CONFIG_FILENAME
            if config_file.exists():
                return cls.from_file(config_file)

        home_config = Path.home() / CONFIG_FILENAME
        if home_config.exists():
            return cls.from_file(home_config)

        return cls()

    def to_snapshot(self) -> Dict[str, Any]:
        return self.model_dump(mode="json", exclude_none=True)

    def save(self, path: Path) -> None:
        """Save configuration to YAML file."""
        with open(path, "w") as f:
            yaml.dump(self.to_snapshot(), f, default_flow_style=False, sort_keys=False)
