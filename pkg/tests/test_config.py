"""Tests for configuration handling."""

from pathlib import Path

import pytest
import yaml
from pydantic import ValidationError

from tclmarket.config import (
    CONFIG_FILENAME,
    DEFAULT_PRICES,
    DEFAULT_WEATHER,
    BiddingMode,
    CostConfig,
    EmSettings,
    PricingMode,
    ScenarioConfig,
)
from tclmarket.errors import SchemaError
from tclmarket.market import CostKind


class TestScenarioConfig:
    """Test ScenarioConfig class."""

    def test_default_config(self):
        """Test default configuration values."""
        config = ScenarioConfig()

        assert config.n_households == 100
        assert config.period_minutes == 5
        assert config.n_periods == 288
        assert config.period_hours == pytest.approx(1 / 12)
        assert config.bidding_mode is BiddingMode.KNOWN_PARAMS
        assert config.pricing_mode is PricingMode.MECHANISM
        assert config.weather_path == DEFAULT_WEATHER
        assert config.price_path == DEFAULT_PRICES
        assert config.em.max_iters == 200

    def test_bundled_data_exists(self):
        """Test the default data files ship with the package."""
        assert DEFAULT_WEATHER.exists()
        assert DEFAULT_PRICES.exists()

    def test_custom_config(self):
        """Test custom configuration values."""
        config = ScenarioConfig(
            n_households=10,
            horizon_hours=2.0,
            bidding_mode="output-based",
            pricing_mode="fixed-ratio",
            gamma=1.5,
        )

        assert config.n_periods == 24
        assert config.bidding_mode is BiddingMode.OUTPUT_BASED
        assert config.pricing_mode is PricingMode.FIXED_RATIO
        assert config.gamma == 1.5

    def test_scaled_capacity(self):
        """Test unset capacity scales with the population."""
        config = ScenarioConfig(n_households=10, capacity_fraction=0.5)

        assert config.resolve_unresponsive() == pytest.approx(120.0)
        assert config.resolve_capacity(40.0) == pytest.approx(140.0)

    def test_explicit_capacity(self):
        """Test explicit capacity and unresponsive load are used verbatim."""
        config = ScenarioConfig(feeder_capacity=500.0, unresponsive_power=100.0)

        assert config.resolve_capacity(1e6) == 500.0
        assert config.resolve_unresponsive() == 100.0

    def test_capacity_below_unresponsive(self):
        """Test capacity must exceed the unresponsive load."""
        with pytest.raises(ValidationError):
            ScenarioConfig(feeder_capacity=50.0, unresponsive_power=100.0)

    def test_gamma_below_one(self):
        """Test the fixed ratio cannot undercut the base price."""
        with pytest.raises(ValidationError):
            ScenarioConfig(gamma=0.9)

    def test_odd_period(self):
        """Test periods must tile an hour."""
        with pytest.raises(ValidationError):
            ScenarioConfig(period_minutes=7)

    def test_unknown_mode(self):
        """Test unknown bidding modes are rejected."""
        with pytest.raises(ValidationError):
            ScenarioConfig(bidding_mode="psychic")

    def test_expand_path(self, monkeypatch, tmp_path):
        """Test environment variables expand in data paths."""
        monkeypatch.setenv("TCL_DATA", str(tmp_path))
        config = ScenarioConfig(weather_path="$TCL_DATA/w.csv")

        assert config.weather_path == tmp_path / "w.csv"


class TestConfigFiles:
    """Test loading and saving configuration files."""

    def test_from_file(self, tmp_path):
        """Test loading configuration from file."""
        config_file = tmp_path / "config.yml"
        config_file.write_text(yaml.dump({"n_households": 7, "cost": {"kind": "quadratic", "quadratic": 0.2}}))

        config = ScenarioConfig.from_file(config_file)

        assert config.n_households == 7
        assert config.cost.kind is CostKind.QUADRATIC

    def test_relative_paths_resolve_against_file(self, tmp_path):
        """Test relative data paths are taken from the config folder."""
        config_file = tmp_path / "config.yml"
        config_file.write_text(yaml.dump({"weather_path": "data/w.csv"}))

        assert ScenarioConfig.from_file(config_file).weather_path == tmp_path / "data" / "w.csv"

    def test_from_missing_file(self, tmp_path):
        """Test a missing file gives the defaults."""
        assert ScenarioConfig.from_file(tmp_path / "nope.yml") == ScenarioConfig()

    def test_non_mapping(self, tmp_path):
        """Test a YAML list is a schema error."""
        config_file = tmp_path / "config.yml"
        config_file.write_text("- 1\n- 2\n")

        with pytest.raises(SchemaError):
            ScenarioConfig.from_file(config_file)

    def test_find_config_in_parent(self, tmp_path):
        """Test finding config file in a parent directory."""
        (tmp_path / CONFIG_FILENAME).write_text(yaml.dump({"n_households": 3}))
        nested = tmp_path / "a" / "b"
        nested.mkdir(parents=True)

        assert ScenarioConfig.find_config(nested).n_households == 3

    def test_find_config_default(self, tmp_path, monkeypatch):
        """Test no config file anywhere gives the defaults."""
        monkeypatch.setattr(Path, "home", lambda: tmp_path / "home")
        assert ScenarioConfig.find_config(tmp_path).n_households == 100

    def test_save_and_reload(self, tmp_path):
        """Test a saved config loads back to the same settings."""
        config = ScenarioConfig(n_households=12, seed=4, em=EmSettings(max_iters=9))
        path = tmp_path / CONFIG_FILENAME
        config.save(path)

        loaded = ScenarioConfig.from_file(path)
        assert loaded.n_households == 12
        assert loaded.seed == 4
        assert loaded.em.max_iters == 9
        assert loaded.weather_path == config.weather_path


class TestCostConfig:
    """Test the cost settings."""

    def test_defaults_to_base_price(self):
        """Test an unset linear coefficient follows the period's base price."""
        model = CostConfig().model(0.13)
        assert model.linear == 0.13
        assert model.kind is CostKind.LINEAR

    def test_fixed_linear(self):
        """Test an explicit linear coefficient overrides the base price."""
        assert CostConfig(linear=0.2).model(0.13).linear == 0.2
