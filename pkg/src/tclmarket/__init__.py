"""tclmarket - market-based coordination of thermostatically controlled loads."""

from tclmarket.agent import Bid, PriceStats, QuadraticValuation, UserPrefs, realistic_bid
from tclmarket.config import ScenarioConfig
from tclmarket.estimation import MeasurementLog, UncertainModel, em_fit
from tclmarket.market import CostModel, build_demand_curve, clear, solve_team_problem
from tclmarket.scenario import run_scenario
from tclmarket.thermal import BuildingParams, EtpParams, HybridState, simulate_period
from tclmarket.version import __version__

__all__ = [
    "Bid",
    "BuildingParams",
    "CostModel",
    "EtpParams",
    "HybridState",
    "MeasurementLog",
    "PriceStats",
    "QuadraticValuation",
    "ScenarioConfig",
    "UncertainModel",
    "UserPrefs",
    "build_demand_curve",
    "clear",
    "em_fit",
    "realistic_bid",
    "run_scenario",
    "simulate_period",
    "solve_team_problem",
    "__version__",
]
