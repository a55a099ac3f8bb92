"""Double-auction clearing under a feeder capacity limit, and the team-problem oracle.

Two mechanisms live here. ``clear`` works on the two-scalar step bids that
households actually send. ``clear_responses`` works on exact response
functions h_i and is the one whose outcome can be compared with the welfare
optimum computed by ``solve_team_problem``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import optimize

from tclmarket.agent import Bid, QuadraticValuation, optimal_allocation
from tclmarket.errors import Infeasible, InfeasibleCapacity, InvalidParameters
from tclmarket.thermal import DEFAULT_PERIOD

logger = logging.getLogger(__name__)

CAPACITY_TOL = 1e-9
PRICE_XTOL = 1e-13
DUAL_BISECTION_ITERS = 200

Allocations = Union[Mapping[str, float], Sequence[float]]


class CostKind(str, Enum):
    LINEAR = "linear"
    QUADRATIC = "quadratic"


@dataclass(frozen=True)
class CostModel:
    """Procurement cost C(x) = linear * x + quadratic * x**2 / 2 of x kWh per period."""

    kind: CostKind = CostKind.LINEAR
    linear: float = 0.0
    quadratic: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", CostKind(self.kind))
        if self.quadratic < 0:
            raise InvalidParameters(f"quadratic cost coefficient must be >= 0, got {self.quadratic}")
        if self.kind is CostKind.LINEAR and self.quadratic != 0:
            raise InvalidParameters("linear cost model cannot carry a quadratic coefficient")

    @classmethod
    def at_base_price(cls, base_price: float) -> "CostModel":
        return cls(CostKind.LINEAR, linear=base_price)

    def cost(self, energy: float) -> float:
        return self.linear * energy + 0.5 * self.quadratic * energy * energy

    def marginal(self, energy: float) -> float:
        return self.linear + self.quadratic * energy


@dataclass(frozen=True)
class DemandCurve:
    """Aggregate step demand in kW; ``bids`` is sorted by price descending."""

    bids: Tuple[Bid, ...]
    unresponsive: float

    @property
    def steps(self) -> List[Tuple[float, float]]:
        cumulative = self.unresponsive + np.cumsum([b.quantity for b in self.bids])
        return [(b.price, float(c)) for b, c in zip(self.bids, cumulative)]

    @property
    def max_demand(self) -> float:
        return self.unresponsive + sum(b.quantity for b in self.bids)

    def served_bids(self, price: float) -> List[Bid]:
        return [b for b in self.bids if b.price > price]

    def demand_at(self, price: float) -> float:
        """Power requested at a price: unresponsive load plus bids strictly above it."""
        return self.unresponsive + sum(b.quantity for b in self.served_bids(price))


@dataclass
class ClearingResult:
    price: float
    allocations: Dict[str, float]
    congested: bool
    p_bar: Optional[float]
    p_star: float
    cleared_power: float = 0.0


@dataclass
class TeamSolution:
    """Welfare-maximizing allocation with its Lagrange multipliers.

    ``price`` is the scalar λ = C'(Σa) + u that every load's allocation
    best-responds to; ``multiplier`` is the capacity dual u.
    """

    allocations: Dict[str, float]
    welfare: float
    multiplier: float
    price: float
    per_load_duals: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    capacity_binding: bool = False


@dataclass
class RealizationReport:
    realized: bool
    price_realizable: bool
    max_allocation_deviation: float
    welfare_gap: float
    clearing_price: float
    team_price: float

    def to_dict(self) -> Dict[str, object]:
        return {
            "realized": self.realized,
            "price_realizable": self.price_realizable,
            "max_allocation_deviation": self.max_allocation_deviation,
            "welfare_gap": self.welfare_gap,
            "clearing_price": self.clearing_price,
            "team_price": self.team_price,
        }


def build_demand_curve(bids: Sequence[Bid], q_uc: float) -> DemandCurve:
    """Order bids by descending price (ties by load id) on top of the unresponsive load."""
    if q_uc < 0:
        raise InvalidParameters(f"unresponsive power must be non-negative, got {q_uc}")
    ordered = sorted(bids, key=lambda b: (-b.price, str(b.load_id)))
    return DemandCurve(bids=tuple(ordered), unresponsive=float(q_uc))


def _load_ids(n: int, load_ids: Optional[Sequence[str]]) -> List[str]:
    if load_ids is None:
        return [str(i) for i in range(n)]
    if len(load_ids) != n:
        raise InvalidParameters(f"expected {n} load ids, got {len(load_ids)}")
    return [str(i) for i in load_ids]


def _fixed_point_price(
    energy_at: Callable[[float], float], cost: CostModel, lo_energy: float, hi_energy: float
) -> float:
    """Price p with p = C'(energy_at(p)) for a demand non-increasing in p."""
    if cost.quadratic == 0:
        return cost.linear
    lo, hi = cost.marginal(lo_energy), cost.marginal(hi_energy)

    def excess(p: float) -> float:
        return p - cost.marginal(energy_at(p))

    if hi - lo <= PRICE_XTOL or excess(lo) >= 0:
        return lo
    if excess(hi) <= 0:
        return hi
    return float(optimize.bisect(excess, lo, hi, xtol=PRICE_XTOL))


def clear(
    curve: DemandCurve,
    base_price: float,
    cost: Optional[CostModel] = None,
    capacity: float = float("inf"),
    period: float = DEFAULT_PERIOD,
    partial_marginal_service: bool = False,
) -> ClearingResult:
    """Clear one period of step bids against the feeder capacity (kW).

    P* solves p = C'(energy requested at p) and defaults to the base price.
    P̄ is the price of the first bid, walking down the curve, whose inclusion
    pushes demand above capacity; bids priced at P̄ or below are unserved
    unless ``partial_marginal_service`` shares the leftover capacity among
    the bids sitting exactly at P̄.
    """
    cost = cost or CostModel.at_base_price(base_price)
    if curve.unresponsive > capacity + CAPACITY_TOL:
        raise Infeasible(
            f"unresponsive load {curve.unresponsive:.3f} kW exceeds capacity {capacity:.3f} kW"
        )

    p_bar: Optional[float] = None
    for price, cumulative in curve.steps:
        if cumulative > capacity + CAPACITY_TOL:
            p_bar = price
            break

    p_star = _fixed_point_price(
        lambda p: curve.demand_at(p) * period,
        cost,
        curve.unresponsive * period,
        curve.max_demand * period,
    )
    price = p_star if p_bar is None else max(p_bar, p_star)
    congested = p_bar is not None and p_bar > p_star

    allocations = {str(b.load_id): 0.0 for b in curve.bids}
    served_power = curve.unresponsive
    for bid in curve.served_bids(price):
        allocations[str(bid.load_id)] = bid.quantity * period
        served_power += bid.quantity

    if congested and partial_marginal_service:
        marginal = [b for b in curve.bids if b.price == price]
        requested = sum(b.quantity for b in marginal)
        if requested > 0:
            share = min(1.0, max(0.0, (capacity - served_power) / requested))
            for bid in marginal:
                allocations[str(bid.load_id)] = bid.quantity * share * period
            served_power += requested * share

    logger.debug(
        f"cleared at {price:.5f} (p_bar={p_bar}, p_star={p_star:.5f}, "
        f"congested={congested}, power={served_power:.2f} kW)"
    )
    return ClearingResult(
        price=float(price),
        allocations=allocations,
        congested=congested,
        p_bar=None if p_bar is None else float(p_bar),
        p_star=float(p_star),
        cleared_power=float(served_power),
    )


def aggregate_response(valuations: Sequence[QuadraticValuation], price: float) -> float:
    """Total energy b(p) requested by truthful response-function bids."""
    return float(sum(optimal_allocation(v, price) for v in valuations))


def _capacity_price(valuations: Sequence[QuadraticValuation], capacity_energy: float) -> Optional[float]:
    """Lowest price at which b(p) <= capacity, exact on the piecewise-linear b."""
    if sum(v.a_max for v in valuations) <= capacity_energy + CAPACITY_TOL:
        return None
    breakpoints = sorted({bp for v in valuations for bp in v.breakpoints()})
    demands = [aggregate_response(valuations, p) for p in breakpoints]
    k = next(i for i, d in enumerate(demands) if d <= capacity_energy + CAPACITY_TOL)
    if k == 0:
        return breakpoints[0]
    lo, hi, d_lo = breakpoints[k - 1], breakpoints[k], demands[k - 1]
    # b is linear on [lo, hi) and right-continuous at lo.
    mid = 0.5 * (lo + hi)
    slope = (aggregate_response(valuations, mid) - d_lo) / (mid - lo)
    d_left_of_hi = d_lo + slope * (hi - lo)
    if d_left_of_hi > capacity_energy + CAPACITY_TOL:
        return hi
    return lo + (d_lo - capacity_energy) / (d_lo - d_left_of_hi) * (hi - lo)


def clear_responses(
    valuations: Sequence[QuadraticValuation],
    cost: CostModel,
    capacity_energy: float,
    load_ids: Optional[Sequence[str]] = None,
) -> ClearingResult:
    """Clear truthful response-function bids; capacity is energy per period (kWh)."""
    if capacity_energy < 0:
        raise InfeasibleCapacity(f"capacity must be non-negative, got {capacity_energy}")
    ids = _load_ids(len(valuations), load_ids)
    p_bar = _capacity_price(valuations, capacity_energy)
    p_star = _fixed_point_price(
        lambda p: aggregate_response(valuations, p),
        cost,
        0.0,
        sum(v.a_max for v in valuations),
    )
    price = p_star if p_bar is None else max(p_bar, p_star)
    allocations = {i: optimal_allocation(v, price) for i, v in zip(ids, valuations)}
    return ClearingResult(
        price=float(price),
        allocations=allocations,
        congested=p_bar is not None and p_bar > p_star,
        p_bar=p_bar,
        p_star=float(p_star),
        cleared_power=sum(allocations.values()),
    )


def _bisect_down(total: Callable[[float], float], target: float, lo: float, hi: float) -> float:
    """Smallest price (to machine precision) with total(price) <= target."""
    for _ in range(DUAL_BISECTION_ITERS):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if total(mid) <= target + CAPACITY_TOL:
            hi = mid
        else:
            lo = mid
    return hi


def solve_team_problem(
    valuations: Sequence[QuadraticValuation],
    cost: CostModel,
    capacity_energy: float,
    load_ids: Optional[Sequence[str]] = None,
) -> TeamSolution:
    """Maximize Σ V_i(a_i) - C(Σ a_i) subject to Σ a_i <= capacity by dual bisection."""
    if capacity_energy < 0:
        raise InfeasibleCapacity(f"capacity must be non-negative, got {capacity_energy}")
    ids = _load_ids(len(valuations), load_ids)
    if not valuations:
        return TeamSolution({}, -cost.cost(0.0), 0.0, cost.marginal(0.0))

    def allocate(lam: float) -> List[float]:
        return [optimal_allocation(v, lam) for v in valuations]

    def total(lam: float) -> float:
        return float(sum(allocate(lam)))

    top = max(v.slope for v in valuations) + 1.0
    bottom = min(min(v.breakpoints()) for v in valuations) - 1.0
    lam0 = _fixed_point_price(total, cost, 0.0, sum(v.a_max for v in valuations))
    binding = total(lam0) > capacity_energy + CAPACITY_TOL
    lam = _bisect_down(total, capacity_energy, min(bottom, lam0), max(top, lam0)) if binding else lam0
    alloc = allocate(lam)

    if binding:
        # Linear loads indifferent at λ absorb whatever capacity is left.
        tied = [i for i, v in enumerate(valuations) if v.is_linear and abs(v.slope - lam) <= 1e-9]
        residual = capacity_energy - sum(a for i, a in enumerate(alloc) if i not in tied)
        for i in tied:
            alloc[i] = min(valuations[i].a_max, max(0.0, residual))
            residual -= alloc[i]

    used = float(sum(alloc))
    multiplier = max(0.0, lam - cost.marginal(used)) if binding else 0.0
    duals: Dict[str, Tuple[float, float]] = {}
    for load_id, v, a in zip(ids, valuations, alloc):
        gap = v.marginal(a) - lam
        at_max = a >= v.a_max - 1e-12
        at_zero = a <= 1e-12
        duals[load_id] = (max(gap, 0.0) if at_max else 0.0, max(-gap, 0.0) if at_zero else 0.0)

    value = welfare(alloc, valuations, cost)
    logger.debug(f"team optimum: λ={lam:.6f}, u={multiplier:.6f}, Σa={used:.6f}, welfare={value:.6f}")
    return TeamSolution(
        allocations=dict(zip(ids, alloc)),
        welfare=value,
        multiplier=multiplier,
        price=float(lam),
        per_load_duals=duals,
        capacity_binding=binding,
    )


def _as_vector(allocations: Allocations, ids: Sequence[str]) -> np.ndarray:
    if isinstance(allocations, Mapping):
        return np.array([float(allocations.get(i, 0.0)) for i in ids])
    return np.asarray(list(allocations), dtype=float)


def welfare(
    allocations: Allocations,
    valuations: Sequence[QuadraticValuation],
    cost: CostModel,
    load_ids: Optional[Sequence[str]] = None,
) -> float:
    """Social welfare Σ V_i(a_i) - C(Σ a_i)."""
    a = _as_vector(allocations, _load_ids(len(valuations), load_ids))
    return float(sum(v.value(x) for v, x in zip(valuations, a)) - cost.cost(float(a.sum())))


def _response_slope(v: QuadraticValuation, price: float) -> float:
    if not v.is_linear and v.slope + v.curvature * v.a_max < price < v.slope:
        return 1.0 / v.curvature
    return 0.0


def _price_realizes(
    target: np.ndarray, valuations: Sequence[QuadraticValuation], tol: float
) -> bool:
    """Whether some broadcast price makes every best response hit ``target``."""
    bps = sorted({bp for v in valuations for bp in v.breakpoints()})
    if not bps:
        return True
    edges = [bps[0] - 1.0] + bps + [bps[-1] + 1.0]
    candidates = list(edges)
    for lo, hi in zip(edges, edges[1:]):
        mid = 0.5 * (lo + hi)
        candidates.append(mid)
        # Responses are affine between breakpoints, so a least-squares price is exact if one exists.
        slopes = np.array([_response_slope(v, mid) for v in valuations])
        if slopes.any():
            base = np.array([optimal_allocation(v, mid) for v in valuations])
            p = mid + float(slopes @ (target - base) / (slopes @ slopes))
            if lo <= p <= hi:
                candidates.append(p)
    for p in candidates:
        response = np.array([optimal_allocation(v, p) for v in valuations])
        if np.max(np.abs(response - target)) <= tol:
            return True
    return False


def verify_realization(
    team: TeamSolution,
    clearing: ClearingResult,
    valuations: Sequence[QuadraticValuation],
    cost: CostModel,
    load_ids: Optional[Sequence[str]] = None,
    tol: float = 1e-6,
) -> RealizationReport:
    """Check that the clearing price realizes the team optimum.

    ``realized`` requires every load's best response at the clearing price to
    match its team allocation and the two welfares to agree. ``price_realizable``
    records whether any single broadcast price could have produced the team
    allocation at all.
    """
    ids = _load_ids(len(valuations), load_ids)
    team_alloc = _as_vector(team.allocations, ids)
    responses = np.array([optimal_allocation(v, clearing.price) for v in valuations])
    scale = max([1.0] + [v.a_max for v in valuations])
    deviation = float(np.max(np.abs(responses - team_alloc), initial=0.0))
    gap = team.welfare - welfare(responses, valuations, cost)
    realized = deviation <= tol * scale and abs(gap) <= tol * max(1.0, abs(team.welfare))
    price_realizable = realized or _price_realizes(team_alloc, valuations, tol * scale)
    if not price_realizable:
        logger.info("team optimum is not realizable by any single price")
    return RealizationReport(
        realized=realized,
        price_realizable=price_realizable,
        max_allocation_deviation=deviation,
        welfare_gap=float(gap),
        clearing_price=clearing.price,
        team_price=team.price,
    )
