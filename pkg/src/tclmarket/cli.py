"""Command-line interface for tclmarket."""

import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import click
import numpy as np
import yaml
from dotenv import load_dotenv
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

from tclmarket.agent import PriceStats, QuadraticValuation, UserPrefs
from tclmarket.config import CONFIG_FILENAME, BiddingMode, EmSettings, PricingMode, ScenarioConfig
from tclmarket.data_io import (
    load_model,
    load_yaml,
    read_log,
    save_model,
    write_json,
    write_periods_csv,
    write_trace_csv,
    write_trajectories_csv,
)
from tclmarket.errors import TclMarketError
from tclmarket.estimation import UncertainModel, bid_from_estimate, em_fit
from tclmarket.manifest import RunManifest
from tclmarket.market import (
    CostKind,
    CostModel,
    clear_responses,
    solve_team_problem,
    verify_realization,
)
from tclmarket.population import synthesize_population
from tclmarket.scenario import (
    DEFAULT_GAMMAS,
    PeriodRecord,
    influence_index,
    minimal_capping_gamma,
    run_scenario,
    summarize,
)
from tclmarket.version import __version__

console = Console()
logger = logging.getLogger(__name__)

LOG_LEVEL_ENV = "TCLMARKET_LOG_LEVEL"
VERIFY_TOL = 1e-6
DEFAULT_PREFS = {"t_min": 70.0, "t_desired": 73.0, "t_max": 76.0}
DEFAULT_STATS = {"p_avg": 0.10, "p_sigma": 0.02}
TRAJECTORY_SERIES = ("cleared", "realized", "capacity", "price", "base_price")


def _setup_logging() -> None:
    load_dotenv()
    level = os.environ.get(LOG_LEVEL_ENV, "WARNING").upper()
    logging.basicConfig(
        level=level,
        format="%(message)s",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def _fail(message: str, code: int = 1) -> None:
    console.print(f"[red]Error:[/red] {message}")
    sys.exit(code)


def _require_file(path: Path, what: str) -> None:
    if not Path(path).exists():
        _fail(f"{what} not found: {path}", code=2)


def _load_config(config_path: Optional[str]) -> ScenarioConfig:
    try:
        if config_path:
            return ScenarioConfig.from_file(Path(config_path))
        return ScenarioConfig.find_config()
    except ValidationError as e:
        _fail(f"invalid configuration: {e}")
    except TclMarketError as e:
        _fail(str(e))
    raise AssertionError("unreachable")


def _trajectory_rows(records: Sequence[PeriodRecord]) -> List[Dict[str, Any]]:
    rows = []
    for r in records:
        values = (r.cleared_power, r.realized_power, r.capacity, r.clearing.price, r.base_price)
        for series, value in zip(TRAJECTORY_SERIES, values):
            rows.append({"period": r.index, "series": series, "value": value})
    return rows


@click.group()
@click.version_option(__version__, prog_name="tclmarket")
def cli():
    """tclmarket - market coordination of thermostatically controlled loads."""
    _setup_logging()


@cli.command()
@click.option("--force", is_flag=True, help="Overwrite an existing configuration")
@click.option("--households", "-n", type=int, help="Number of households")
@click.option("--seed", type=int, help="Random seed")
@click.argument("path", type=click.Path(), default=".")
def init(force: bool, households: Optional[int], seed: Optional[int], path: str):
    """Write a sample scenario configuration to PATH."""
    project_path = Path(path).resolve()
    config_path = project_path / CONFIG_FILENAME

    if config_path.exists() and not force:
        console.print(f"[yellow]⚠️  {CONFIG_FILENAME} already exists at {config_path}[/yellow]")
        console.print("Use --force to overwrite")
        return

    updates: Dict[str, Any] = {}
    if households is not None:
        updates["n_households"] = households
    if seed is not None:
        updates["seed"] = seed
    project_path.mkdir(parents=True, exist_ok=True)
    ScenarioConfig(**updates).save(config_path)

    console.print("\n[green]✅ tclmarket initialized[/green]")
    console.print(f"\nConfiguration saved to: [cyan]{config_path}[/cyan]")
    console.print("\n[bold]Next steps:[/bold]")
    console.print("1. Edit the feeder, population and bidding settings")
    console.print("2. Run a day of market periods: [cyan]tclmarket simulate --out results[/cyan]")
    console.print("3. Check the mechanism against the team optimum: [cyan]tclmarket verify[/cyan]")


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Scenario YAML")
def config(config_path: Optional[str]):
    """Show the resolved scenario configuration."""
    cfg = _load_config(config_path)
    console.print("\n[bold]tclmarket Configuration[/bold]\n")
    if config_path:
        console.print(f"Config file: [cyan]{config_path}[/cyan]\n")
    else:
        found = next(
            (p / CONFIG_FILENAME for p in [Path.cwd(), *Path.cwd().parents] if (p / CONFIG_FILENAME).exists()),
            None,
        )
        if found:
            console.print(f"Config file: [cyan]{found}[/cyan]\n")
        else:
            console.print(f"[yellow]Using default configuration (no {CONFIG_FILENAME} found)[/yellow]\n")

    table = Table(show_header=False)
    table.add_column("Setting", style="cyan")
    table.add_column("Value")
    for key, value in cfg.to_snapshot().items():
        if isinstance(value, dict):
            value = yaml.dump(value, default_flow_style=True).strip()
        table.add_row(key, str(value))
    console.print(table)


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Scenario YAML")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="results", show_default=True)
@click.option("--seed", type=int, help="Override the configured seed")
@click.option("--mode", type=click.Choice([m.value for m in PricingMode]), help="Pricing mode")
@click.option("--bidding", type=click.Choice([m.value for m in BiddingMode]), help="Bidding mode")
@click.option("--gamma", type=float, help="Price ratio for fixed-ratio pricing")
@click.option("--perturb-pct", type=float, help="Bid perturbation in percent")
@click.option("--progress/--no-progress", default=False, help="Show a progress bar")
def simulate(
    config_path: Optional[str],
    out_dir: str,
    seed: Optional[int],
    mode: Optional[str],
    bidding: Optional[str],
    gamma: Optional[float],
    perturb_pct: Optional[float],
    progress: bool,
):
    """Run the market over the configured horizon and write the results."""
    cfg = _load_config(config_path)
    overrides = {
        "seed": seed,
        "pricing_mode": mode,
        "bidding_mode": bidding,
        "gamma": gamma,
        "perturb_pct": perturb_pct,
    }
    try:
        cfg = ScenarioConfig(**{**cfg.model_dump(), **{k: v for k, v in overrides.items() if v is not None}})
    except ValidationError as e:
        _fail(f"invalid configuration: {e}")
    _require_file(cfg.weather_path, "weather file")
    _require_file(cfg.price_path, "price file")

    inputs = [cfg.weather_path, cfg.price_path] + ([Path(config_path)] if config_path else [])
    manifest = RunManifest.start("simulate", cfg.to_snapshot(), inputs, seed=cfg.seed)
    try:
        records = run_scenario(cfg, progress=progress)
    except TclMarketError as e:
        _fail(str(e))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(records)
    outputs = {
        "periods": out / "periods.csv",
        "summary": out / "summary.json",
        "trajectories": out / "trajectories.csv",
    }
    write_periods_csv((r.to_row() for r in records), outputs["periods"])
    write_json(summary, outputs["summary"])
    write_trajectories_csv(_trajectory_rows(records), outputs["trajectories"])
    for name, path in outputs.items():
        manifest.add_output(name, path)
    write_json(manifest.to_dict(), out / "manifest.json")

    table = Table(title=f"Simulation ({cfg.pricing_mode.value}, {cfg.bidding_mode.value})")
    table.add_column("Metric", style="cyan")
    table.add_column("Value", justify="right")
    for key, value in summary.items():
        table.add_row(key, f"{value:.4g}" if isinstance(value, float) else str(value))
    console.print(table)
    console.print(f"\nResults written to: [cyan]{out}[/cyan]")


def _bid_context(init: Dict[str, Any]) -> Tuple[UserPrefs, PriceStats, float, float]:
    prefs = UserPrefs(**{**DEFAULT_PREFS, **init.get("prefs", {})})
    stats = PriceStats(**{**DEFAULT_STATS, **init.get("stats", {})})
    return prefs, stats, float(init.get("q_measured", 1.0)), float(init.get("deadband", 1.0))


@cli.command()
@click.argument("log_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("init_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--truth", "truth_path", type=click.Path(exists=True, dir_okay=False), help="True model YAML")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="fit", show_default=True)
def estimate(log_path: str, init_path: str, truth_path: Optional[str], out_dir: str):
    """Fit a household model to LOG_PATH starting from INIT_PATH and bid from it."""
    inputs = [Path(log_path), Path(init_path)] + ([Path(truth_path)] if truth_path else [])
    try:
        log = read_log(Path(log_path))
        init = load_yaml(Path(init_path))
        model = UncertainModel.from_dict(init.get("model", init))
        settings = EmSettings(**init.get("em", {}))
        prefs, stats, q, deadband = _bid_context(init)
        manifest = RunManifest.start("estimate", {"init": init, "log_samples": len(log)}, inputs)
        result = em_fit(log, model, settings)
        bid = bid_from_estimate(
            result.model, log, prefs, stats, q, posterior=result.posterior,
            deadband=deadband, horizon_steps=settings.horizon_steps,
        )
        report: Dict[str, Any] = {
            "iterations": result.iterations,
            "converged": result.converged,
            "non_monotone": result.non_monotone,
            "final_loglik": result.loglik_trace[-1],
            "bid_price": bid.price,
            "bid_quantity": bid.quantity,
        }
        if truth_path:
            truth = load_model(Path(truth_path))
            known = bid_from_estimate(
                truth, log, prefs, stats, q, deadband=deadband, horizon_steps=settings.horizon_steps
            )
            report["known_bid_price"] = known.price
            report["bid_error_pct"] = (
                abs(bid.price - known.price) / abs(known.price) * 100.0 if known.price != 0 else None
            )
    except (TclMarketError, ValidationError) as e:
        _fail(str(e))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(result.model, out / "fitted_model.yml")
    write_trace_csv(result.loglik_trace, out / "loglik_trace.csv")
    write_json(report, out / "report.json")
    for name in ("fitted_model.yml", "loglik_trace.csv", "report.json"):
        manifest.add_output(name, out / name)
    write_json(manifest.to_dict(), out / "manifest.json")

    table = Table(title="EM fit")
    table.add_column("Field", style="cyan")
    table.add_column("Value", justify="right")
    for key, value in report.items():
        table.add_row(key, f"{value:.6g}" if isinstance(value, float) else str(value))
    console.print(table)

    if result.non_monotone and not result.converged:
        _fail("log-likelihood decreased and EM did not converge")


def _example_one() -> Tuple[List[QuadraticValuation], CostModel, float]:
    valuations = [QuadraticValuation(0.0, 1.0, 2.0), QuadraticValuation(0.0, 3.0, 2.0)]
    return valuations, CostModel.at_base_price(2.0), 1.0


def _example_two() -> Tuple[List[QuadraticValuation], CostModel, float]:
    valuations = [QuadraticValuation(-1.0, float(i), 1.0) for i in range(1, 101)]
    return valuations, CostModel.at_base_price(20.0), 50.0


def _random_concave(seed: int) -> Tuple[List[QuadraticValuation], CostModel, float]:
    rng = np.random.default_rng(seed)
    valuations = [
        QuadraticValuation(-rng.uniform(0.5, 2.0), rng.uniform(1.0, 10.0), rng.uniform(0.5, 2.0))
        for _ in range(20)
    ]
    capacity = 0.4 * sum(v.a_max for v in valuations)
    return valuations, CostModel(CostKind.QUADRATIC, linear=2.0, quadratic=0.1), capacity


def _congested_period(cfg: ScenarioConfig) -> Tuple[List[QuadraticValuation], CostModel, float]:
    population = synthesize_population(
        cfg.n_households, cfg.seed, cfg.period_hours, cfg.deadband, cfg.k_max
    )
    valuations = [h.valuation for h in population]
    cheapest = min(v.slope + v.curvature * v.a_max for v in valuations)
    cost = cfg.cost.model(max(cheapest - 0.1, 0.0))
    return valuations, cost, cfg.capacity_fraction * sum(v.a_max for v in valuations)


def run_verification(cfg: ScenarioConfig) -> List[Tuple[str, bool, str]]:
    """Pass/fail criteria comparing the mechanism with the team optimum."""
    checks: List[Tuple[str, bool, str]] = []

    valuations, cost, capacity = _example_one()
    team = solve_team_problem(valuations, cost, capacity)
    report = verify_realization(team, clear_responses(valuations, cost, capacity), valuations, cost)
    a = list(team.allocations.values())
    checks.append(
        (
            "two linear users: team optimum (0, 1), welfare 1",
            abs(a[0]) < VERIFY_TOL and abs(a[1] - 1.0) < VERIFY_TOL and abs(team.welfare - 1.0) < VERIFY_TOL,
            f"a = ({a[0]:.6g}, {a[1]:.6g}), welfare {team.welfare:.6g}",
        )
    )
    checks.append(
        (
            "two linear users: not price-realizable",
            not report.price_realizable,
            "not price-realizable" if not report.price_realizable else "a realizing price was found",
        )
    )

    valuations, cost, capacity = _example_two()
    clearing = clear_responses(valuations, cost, capacity)
    checks.append(
        (
            "100 unit users: capacity price 50 sets the clearing price",
            clearing.p_bar is not None
            and abs(clearing.p_bar - 50.0) < VERIFY_TOL
            and abs(clearing.price - 50.0) < VERIFY_TOL,
            f"P̄ = {clearing.p_bar}, P_c* = {clearing.price:.6g}, P* = {clearing.p_star:.6g}",
        )
    )

    for name, (valuations, cost, capacity) in (
        ("random concave users", _random_concave(cfg.seed)),
        ("congested population period", _congested_period(cfg)),
    ):
        clearing = clear_responses(valuations, cost, capacity)
        team = solve_team_problem(valuations, cost, capacity)
        report = verify_realization(team, clearing, valuations, cost, tol=VERIFY_TOL)
        checks.append(
            (
                f"{name}: clearing realizes the team optimum",
                report.realized and abs(report.welfare_gap) < VERIFY_TOL,
                f"welfare gap {report.welfare_gap:.2e}, max deviation {report.max_allocation_deviation:.2e}",
            )
        )
    return checks


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Scenario YAML")
def verify(config_path: Optional[str]):
    """Check that market clearing realizes the welfare-maximizing allocation."""
    cfg = _load_config(config_path)
    try:
        checks = run_verification(cfg)
    except TclMarketError as e:
        _fail(str(e))

    table = Table(title="Mechanism verification")
    table.add_column("Criterion", style="cyan")
    table.add_column("Status", justify="center")
    table.add_column("Details", style="dim")
    for name, ok, details in checks:
        table.add_row(name, "✅" if ok else "❌", details)
    console.print(table)

    failed = [name for name, ok, _ in checks if not ok]
    if failed:
        console.print(f"\n[red]❌ Failed:[/red] {len(failed)} of {len(checks)}")
        sys.exit(1)
    console.print(f"\n[green]✅ All {len(checks)} checks passed[/green]")


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Scenario YAML")
@click.option("--sizes", default="10,100,1000", show_default=True, help="Comma-separated population sizes")
@click.option("--seeds", "n_seeds", type=int, default=1, show_default=True, help="Trials per size")
@click.option("--jobs", "n_jobs", type=int, default=1, show_default=True, help="joblib workers")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), help="Write results as JSON")
def influence(config_path: Optional[str], sizes: str, n_seeds: int, n_jobs: int, out_path: Optional[str]):
    """Largest price change one household can cause, by population size."""
    cfg = _load_config(config_path)
    try:
        population_sizes = [int(s) for s in sizes.split(",") if s.strip()]
    except ValueError:
        _fail(f"--sizes must be comma-separated integers, got {sizes!r}")
    _require_file(cfg.weather_path, "weather file")
    _require_file(cfg.price_path, "price file")
    try:
        results = influence_index(cfg, population_sizes, n_seeds, n_jobs)
    except TclMarketError as e:
        _fail(str(e))

    table = Table(title="Influence index")
    table.add_column("Households", justify="right", style="cyan")
    table.add_column("Max price change (%)", justify="right")
    for n, pct in results:
        table.add_row(str(n), f"{pct:.4f}")
    console.print(table)
    if out_path:
        write_json({"influence_pct": {str(n): pct for n, pct in results}}, Path(out_path))


@cli.command("sweep-gamma")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Scenario YAML")
@click.option("--gammas", help="Comma-separated ratios (default 1.0 to 5.0 by 0.1)")
def sweep_gamma(config_path: Optional[str], gammas: Optional[str]):
    """Smallest fixed price ratio that keeps the feeder under capacity."""
    cfg = _load_config(config_path)
    grid = [float(g) for g in gammas.split(",")] if gammas else list(DEFAULT_GAMMAS)
    _require_file(cfg.weather_path, "weather file")
    _require_file(cfg.price_path, "price file")
    try:
        found = minimal_capping_gamma(cfg, grid)
    except TclMarketError as e:
        _fail(str(e))

    if found is None:
        console.print(f"[yellow]No ratio up to {max(grid)} caps the feeder[/yellow]")
        sys.exit(1)
    gamma, records = found
    summary = summarize(records)
    console.print(
        Panel(
            f"γ = [bold]{gamma}[/bold]\n"
            f"max realized {summary['max_realized_kw']:.1f} kW of {summary['capacity_kw']:.1f} kW\n"
            f"total welfare {summary['total_welfare']:.4f}",
            title="Minimal capping ratio",
        )
    )


def main():
    """Main entry point for the CLI."""
    cli()


if __name__ == "__main__":
    main()
