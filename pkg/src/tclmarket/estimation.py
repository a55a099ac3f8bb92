"""Output-based bidding: joint state and parameter estimation of the discrete ETP model.

The model is

    eta[k] = A eta[k-1] + B zeta[k-1] + C(q[k-1]) + w,    w ~ N(0, Omega)
    y[k]   = eta[k][0] + v,                               v ~ N(0, Sigma)

with eta[0] ~ N(m0, P0). Arrays are indexed from 0, so the transition into
step k uses the exogenous inputs and the relay state logged at step k - 1.
Parameters are fitted by expectation maximization: a Kalman filter and RTS
smoother give the posterior of the states, and closed-form conditional
maximizations update the parameters one group at a time.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg

from tclmarket.agent import Bid, PriceStats, UserPrefs, bid_from_setpoints
from tclmarket.config import EmSettings, NoiseKind
from tclmarket.errors import (
    InvalidParameters,
    NonMonotoneWarning,
    NumericalBreakdown,
    RankDeficient,
    SchemaError,
    SingularPrediction,
)
from tclmarket.thermal import BuildingParams

logger = logging.getLogger(__name__)

L = np.array([1.0, 0.0])
COV_FLOOR = 1e-12
MIN_LOG_LENGTH = 3
DEFAULT_LOG_LENGTH = 360  # 6 h of 1-minute samples
MINUTE = 1.0 / 60.0
COND_LIMIT = 1e12
_LOG_2PI = math.log(2.0 * math.pi)


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _floor_cov(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(_symmetrize(m))
    return _symmetrize(vecs @ np.diag(np.maximum(vals, COV_FLOOR)) @ vecs.T)


def _check_psd(name: str, m: np.ndarray) -> None:
    scale = max(1.0, float(np.abs(m).max()))
    if not np.allclose(m, m.T, atol=1e-10 * scale):
        raise InvalidParameters(f"{name} must be symmetric")
    if np.linalg.eigvalsh(_symmetrize(m)).min() < -1e-10 * scale:
        raise InvalidParameters(f"{name} must be positive semi-definite")


@dataclass(frozen=True, eq=False)
class UncertainModel:
    """Discrete ETP model with Gaussian noise (one time step is one log sample)."""

    a_bar: np.ndarray
    b_bar: np.ndarray
    c_on: np.ndarray
    c_off: np.ndarray
    q_cov: np.ndarray
    r_var: float
    m0: np.ndarray
    p0: np.ndarray

    def __post_init__(self) -> None:
        shapes = {"a_bar": (2, 2), "b_bar": (2, 2), "c_on": (2,), "c_off": (2,), "q_cov": (2, 2), "m0": (2,), "p0": (2, 2)}
        for name, shape in shapes.items():
            value = np.array(getattr(self, name), dtype=float).reshape(shape)
            if not np.all(np.isfinite(value)):
                raise InvalidParameters(f"{name} must be finite")
            object.__setattr__(self, name, value)
        object.__setattr__(self, "r_var", float(self.r_var))
        _check_psd("q_cov", self.q_cov)
        _check_psd("p0", self.p0)
        if not self.r_var >= 0:
            raise InvalidParameters(f"r_var must be non-negative, got {self.r_var}")

    def c(self, on: bool) -> np.ndarray:
        return self.c_on if on else self.c_off

    def step_mean(self, eta: np.ndarray, exog: np.ndarray, on: bool) -> np.ndarray:
        return self.a_bar @ eta + self.b_bar @ exog + self.c(on)

    @classmethod
    def from_building(
        cls,
        building: BuildingParams,
        dt_hours: float = MINUTE,
        q_cov: Any = 0.0,
        r_var: float = 0.0,
        m0: Optional[Sequence[float]] = None,
        p0: Any = None,
    ) -> "UncertainModel":
        """Exact zero-order-hold discretization of a building's ETP model."""
        a = building.a_matrix
        a_bar = linalg.expm(a * dt_hours)
        gamma = np.linalg.solve(a, a_bar - np.eye(2))
        q = np.eye(2) * q_cov if np.isscalar(q_cov) else np.asarray(q_cov, dtype=float)
        p = np.eye(2) * 1e-2 if p0 is None else (np.eye(2) * p0 if np.isscalar(p0) else np.asarray(p0))
        return cls(
            a_bar=a_bar,
            b_bar=gamma @ building.exog_matrix,
            c_on=gamma @ building.mode_drive(True),
            c_off=gamma @ building.mode_drive(False),
            q_cov=q,
            r_var=r_var,
            m0=np.zeros(2) if m0 is None else np.asarray(m0, dtype=float),
            p0=p,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "a_bar": self.a_bar.tolist(),
            "b_bar": self.b_bar.tolist(),
            "c_on": self.c_on.tolist(),
            "c_off": self.c_off.tolist(),
            "q_cov": self.q_cov.tolist(),
            "r_var": self.r_var,
            "m0": self.m0.tolist(),
            "p0": self.p0.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "UncertainModel":
        missing = {"a_bar", "b_bar", "c_on", "c_off", "q_cov", "r_var", "m0", "p0"} - set(data)
        if missing:
            raise SchemaError(f"model is missing fields: {sorted(missing)}")
        return cls(**{k: data[k] for k in ("a_bar", "b_bar", "c_on", "c_off", "q_cov", "r_var", "m0", "p0")})


@dataclass(frozen=True, eq=False)
class MeasurementLog:
    """Air temperatures with the relay states and exogenous inputs of the same samples."""

    temps: np.ndarray
    modes: np.ndarray
    exog: np.ndarray

    def __post_init__(self) -> None:
        temps = np.asarray(self.temps, dtype=float).reshape(-1)
        modes = np.asarray(self.modes, dtype=bool).reshape(-1)
        exog = np.asarray(self.exog, dtype=float).reshape(-1, 2)
        if not len(temps) == len(modes) == len(exog):
            raise SchemaError(
                f"log columns differ in length: {len(temps)} temps, {len(modes)} modes, {len(exog)} exog"
            )
        if len(temps) < MIN_LOG_LENGTH:
            raise SchemaError(f"a measurement log needs at least {MIN_LOG_LENGTH} samples, got {len(temps)}")
        object.__setattr__(self, "temps", temps)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "exog", exog)

    def __len__(self) -> int:
        return len(self.temps)

    def tail(self, n: int) -> "MeasurementLog":
        return MeasurementLog(self.temps[-n:], self.modes[-n:], self.exog[-n:])


@dataclass(frozen=True, eq=False)
class FilterResult:
    """Forward pass: ``pred_*[k]`` is the prior of step k before seeing y[k]."""

    means: np.ndarray
    covs: np.ndarray
    pred_means: np.ndarray
    pred_covs: np.ndarray
    gains: np.ndarray
    loglik: float


@dataclass(frozen=True, eq=False)
class SmoothedPosterior:
    """Backward pass; ``pairwise[k]`` is E[eta_k eta_{k-1}^T] (``pairwise[0]`` is unused)."""

    means: np.ndarray
    covs: np.ndarray
    pairwise: np.ndarray
    cross_covs: np.ndarray
    loglik: float

    def second_moment(self, k: int) -> np.ndarray:
        return self.covs[k] + np.outer(self.means[k], self.means[k])


@dataclass
class EmResult:
    model: UncertainModel
    loglik_trace: List[float]
    iterations: int
    converged: bool
    non_monotone: bool = False
    posterior: Optional[SmoothedPosterior] = field(default=None, repr=False)


def kalman_filter(model: UncertainModel, log: MeasurementLog) -> FilterResult:
    n = len(log)
    means = np.empty((n, 2))
    covs = np.empty((n, 2, 2))
    pred_means = np.empty((n, 2))
    pred_covs = np.empty((n, 2, 2))
    gains = np.empty((n, 2))
    loglik = 0.0

    mean, cov = model.m0, model.p0
    for k in range(n):
        if k > 0:
            mean = model.step_mean(means[k - 1], log.exog[k - 1], log.modes[k - 1])
            cov = model.a_bar @ covs[k - 1] @ model.a_bar.T + model.q_cov
        s = float(L @ cov @ L) + model.r_var
        if not s > 0:
            raise NumericalBreakdown(f"innovation variance {s} is not positive at step {k}")
        gain = cov @ L / s
        innovation = log.temps[k] - mean[0]
        pred_means[k], pred_covs[k], gains[k] = mean, cov, gain
        means[k] = mean + gain * innovation
        covs[k] = _symmetrize((np.eye(2) - np.outer(gain, L)) @ cov)
        loglik -= 0.5 * (_LOG_2PI + math.log(s) + innovation * innovation / s)

    return FilterResult(means, covs, pred_means, pred_covs, gains, loglik)


def kalman_smoother(filtered: FilterResult, model: UncertainModel, log: MeasurementLog) -> SmoothedPosterior:
    n = len(log)
    means = filtered.means.copy()
    covs = filtered.covs.copy()
    pairwise = np.zeros((n, 2, 2))
    cross = np.zeros((n, 2, 2))
    for k in range(n - 2, -1, -1):
        pred_cov = filtered.pred_covs[k + 1]
        if np.linalg.cond(pred_cov) > 1.0 / np.finfo(float).eps:
            raise SingularPrediction(f"predicted covariance at step {k + 1} is singular")
        # J = Phi A^T inv(P); P and Phi are symmetric.
        j = np.linalg.solve(pred_cov, model.a_bar @ filtered.covs[k]).T
        means[k] = filtered.means[k] + j @ (means[k + 1] - filtered.pred_means[k + 1])
        covs[k] = _symmetrize(filtered.covs[k] + j @ (covs[k + 1] - pred_cov) @ j.T)
        cross[k + 1] = covs[k + 1] @ j.T
    for k in range(1, n):
        pairwise[k] = cross[k] + np.outer(means[k], means[k - 1])
    return SmoothedPosterior(means, covs, pairwise, cross, filtered.loglik)


def e_step(model: UncertainModel, log: MeasurementLog) -> SmoothedPosterior:
    return kalman_smoother(kalman_filter(model, log), model, log)


def _check_rank(name: str, m: np.ndarray) -> None:
    d = np.sqrt(np.abs(np.diag(m)))
    if np.any(d == 0):
        raise RankDeficient(f"{name} is singular: insufficient excitation in the log")
    if np.linalg.cond(m / np.outer(d, d)) > COND_LIMIT:
        raise RankDeficient(f"{name} is ill-conditioned: insufficient excitation in the log")


def _transition_residual(
    a_bar: np.ndarray, drives: np.ndarray, post: SmoothedPosterior
) -> np.ndarray:
    """Σ_k E[r r^T] with r = eta_k - A eta_{k-1} - drive_k, over k >= 1."""
    total = np.zeros((2, 2))
    for k in range(1, len(post.means)):
        r = post.means[k] - a_bar @ post.means[k - 1] - drives[k]
        cov = (
            post.covs[k]
            - post.cross_covs[k] @ a_bar.T
            - a_bar @ post.cross_covs[k].T
            + a_bar @ post.covs[k - 1] @ a_bar.T
        )
        total += cov + np.outer(r, r)
    return total


def _drives(b_bar: np.ndarray, c_on: np.ndarray, c_off: np.ndarray, log: MeasurementLog) -> np.ndarray:
    """Per-step drive B zeta[k-1] + C(q[k-1]); row 0 is unused."""
    drives = np.zeros((len(log), 2))
    prev_on = log.modes[:-1, None]
    drives[1:] = log.exog[:-1] @ b_bar.T + np.where(prev_on, c_on, c_off)
    return drives


def _sequential_linear_update(
    post: SmoothedPosterior, log: MeasurementLog, prev: UncertainModel
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    mu = post.means
    zeta = log.exog[:-1]
    prev_on = log.modes[:-1]
    c_prev = np.where(prev_on[:, None], prev.c_on, prev.c_off)

    eta_eta = sum(post.second_moment(k) for k in range(len(log) - 1))
    _check_rank("Σ E[eta eta^T]", eta_eta)
    lhs = post.pairwise[1:].sum(axis=0) - (zeta @ prev.b_bar.T + c_prev).T @ mu[:-1]
    a_new = np.linalg.solve(eta_eta.T, lhs.T).T

    zeta_zeta = zeta.T @ zeta
    _check_rank("Σ zeta zeta^T", zeta_zeta)
    resid_b = mu[1:] - mu[:-1] @ a_new.T - c_prev
    b_new = np.linalg.solve(zeta_zeta.T, (resid_b.T @ zeta).T).T

    resid_c = mu[1:] - mu[:-1] @ a_new.T - zeta @ b_new.T
    c_on = resid_c[prev_on].mean(axis=0) if prev_on.any() else prev.c_on
    c_off = resid_c[~prev_on].mean(axis=0) if (~prev_on).any() else prev.c_off
    return a_new, b_new, c_on, c_off


def _joint_linear_update(
    post: SmoothedPosterior, log: MeasurementLog, prev: UncertainModel
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Regress eta_k on (eta_{k-1}, zeta_{k-1}, on, off) with expected sufficient statistics."""
    prev_on = log.modes[:-1]
    has_on, has_off = bool(prev_on.any()), bool((~prev_on).any())
    cols = 4 + int(has_on) + int(has_off)
    xx = np.zeros((cols, cols))
    yx = np.zeros((2, cols))
    for k in range(1, len(log)):
        mu_prev, zeta = post.means[k - 1], log.exog[k - 1]
        indicators = ([1.0 if prev_on[k - 1] else 0.0] if has_on else []) + (
            [0.0 if prev_on[k - 1] else 1.0] if has_off else []
        )
        x = np.concatenate([mu_prev, zeta, indicators])
        block = np.outer(x, x)
        block[:2, :2] = post.second_moment(k - 1)
        xx += block
        row = np.outer(post.means[k], x)
        row[:, :2] = post.pairwise[k]
        yx += row
    _check_rank("joint design moments", xx)
    theta = np.linalg.solve(xx.T, yx.T).T
    a_new, b_new = theta[:, :2], theta[:, 2:4]
    c_on = theta[:, 4] if has_on else prev.c_on
    c_off = theta[:, 4 + int(has_on)] if has_off else prev.c_off
    return a_new, b_new, c_on, c_off


def m_step(
    posterior: SmoothedPosterior,
    log: MeasurementLog,
    prev: UncertainModel,
    joint_linear_update: bool = False,
) -> UncertainModel:
    """Closed-form parameter update from the smoothed posterior.

    The linear parameters are updated in sequence (A, then B with the new A,
    then the per-mode offsets with both) unless ``joint_linear_update`` is set.
    The noise covariances follow with the new linear parameters.
    """
    update = _joint_linear_update if joint_linear_update else _sequential_linear_update
    a_new, b_new, c_on, c_off = update(posterior, log, prev)

    n = len(log)
    q_new = _transition_residual(a_new, _drives(b_new, c_on, c_off, log), posterior) / (n - 1)
    r_new = float(
        np.mean(
            (log.temps - posterior.means[:, 0]) ** 2 + posterior.covs[:, 0, 0]
        )
    )
    return UncertainModel(
        a_bar=a_new,
        b_bar=b_new,
        c_on=c_on,
        c_off=c_off,
        q_cov=_floor_cov(q_new),
        r_var=max(r_new, COV_FLOOR),
        m0=posterior.means[0],
        p0=_floor_cov(posterior.covs[0]),
    )


def _gauss_expected_loglik(cov: np.ndarray, scatter: np.ndarray, count: int) -> float:
    """Σ of E[log N(x | ., cov)] for ``count`` terms whose summed scatter is ``scatter``."""
    dim = cov.shape[0]
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise NumericalBreakdown("covariance in the complete-data likelihood is not positive definite")
    return -0.5 * (count * (dim * _LOG_2PI + logdet) + float(np.trace(np.linalg.solve(cov, scatter))))


def expected_complete_loglik(
    model: UncertainModel, posterior: SmoothedPosterior, log: MeasurementLog
) -> float:
    """Expected complete-data log-likelihood of ``model`` under a fixed posterior."""
    n = len(log)
    d0 = posterior.means[0] - model.m0
    init_scatter = posterior.covs[0] + np.outer(d0, d0)
    q_init = _gauss_expected_loglik(model.p0, init_scatter, 1)

    drives = _drives(model.b_bar, model.c_on, model.c_off, log)
    q_trans = _gauss_expected_loglik(model.q_cov, _transition_residual(model.a_bar, drives, posterior), n - 1)

    obs_scatter = np.sum((log.temps - posterior.means[:, 0]) ** 2 + posterior.covs[:, 0, 0])
    q_obs = _gauss_expected_loglik(np.array([[model.r_var]]), np.array([[obs_scatter]]), n)
    return q_init + q_trans + q_obs


def em_fit(
    log: MeasurementLog,
    init: UncertainModel,
    settings: Optional[EmSettings] = None,
    max_iters: Optional[int] = None,
    tol: Optional[float] = None,
) -> EmResult:
    """Alternate E and M steps until the log-likelihood stops improving."""
    settings = settings or EmSettings()
    max_iters = settings.max_iters if max_iters is None else max_iters
    tol = settings.tol if tol is None else tol

    model = init
    posterior = e_step(model, log)
    trace = [posterior.loglik]
    converged = False
    non_monotone = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        candidate = m_step(posterior, log, model, settings.joint_linear_update)
        candidate_post = e_step(candidate, log)
        prev_ll, new_ll = trace[-1], candidate_post.loglik
        if new_ll < prev_ll - settings.jitter * max(1.0, abs(prev_ll)):
            non_monotone = True
            message = f"log-likelihood decreased from {prev_ll:.10g} to {new_ll:.10g} at iteration {iterations}"
            logger.warning(message)
            warnings.warn(message, NonMonotoneWarning, stacklevel=2)
        model, posterior = candidate, candidate_post
        trace.append(new_ll)
        if abs(new_ll - prev_ll) < tol * max(1.0, abs(prev_ll)):
            converged = True
            break

    logger.debug(
        f"EM {'converged' if converged else 'stopped'} after {iterations} iterations, "
        f"loglik {trace[-1]:.6f}"
    )
    return EmResult(model, trace, iterations, converged, non_monotone, posterior)


def _fit_one(log: MeasurementLog, init: UncertainModel, settings: EmSettings) -> EmResult:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonMonotoneWarning)
        return em_fit(log, init, settings)


def fit_population(
    logs: Sequence[MeasurementLog],
    inits: Sequence[UncertainModel],
    settings: Optional[EmSettings] = None,
    n_jobs: int = 1,
) -> List[EmResult]:
    """Independent EM fits of many households, in parallel when ``n_jobs`` != 1."""
    if len(logs) != len(inits):
        raise InvalidParameters(f"got {len(logs)} logs but {len(inits)} initial models")
    settings = settings or EmSettings()
    if n_jobs == 1:
        return [_fit_one(log, init, settings) for log, init in zip(logs, inits)]
    return Parallel(n_jobs=n_jobs)(
        delayed(_fit_one)(log, init, settings) for log, init in zip(logs, inits)
    )


def roll_forward(
    model: UncertainModel, eta: np.ndarray, exog: np.ndarray, on: bool, steps: int
) -> np.ndarray:
    """Air temperatures of the noise-free recursion with the relay held, start included."""
    eta = np.asarray(eta, dtype=float)
    air = [float(eta[0])]
    for _ in range(steps):
        eta = model.step_mean(eta, exog, on)
        air.append(float(eta[0]))
    return np.array(air)


def estimated_u1_u2(
    model: UncertainModel,
    mean: np.ndarray,
    on: bool,
    exog: np.ndarray,
    deadband: float,
    horizon_steps: int = 5,
) -> Tuple[float, float]:
    """Transition setpoints u1, u2 from the estimated model, one market period ahead."""
    half = deadband / 2.0
    t_c = float(mean[0])
    on_air = roll_forward(model, mean, exog, True, horizon_steps)
    off_air = roll_forward(model, mean, exog, False, horizon_steps)
    if on:
        return max(t_c + half, float(off_air.max()) - half), float(on_air.min()) + half
    u1 = float(off_air.max()) - half
    return u1, min(t_c - half, float(on_air.min()) + half, u1)


def bid_from_estimate(
    model: UncertainModel,
    log: MeasurementLog,
    prefs: UserPrefs,
    stats: PriceStats,
    q_measured: float,
    load_id: str = "0",
    posterior: Optional[SmoothedPosterior] = None,
    exog: Optional[np.ndarray] = None,
    deadband: float = 1.0,
    horizon_steps: int = 5,
) -> Bid:
    """Bid from the smoothed estimate of the latest state."""
    posterior = posterior or e_step(model, log)
    exog = log.exog[-1] if exog is None else np.asarray(exog, dtype=float)
    u1, u2 = estimated_u1_u2(
        model, posterior.means[-1], bool(log.modes[-1]), exog, deadband, horizon_steps
    )
    return bid_from_setpoints(u1, u2, prefs, stats, q_measured, load_id)


class KalmanTracker:
    """Online filter carrying the state estimate between EM refits."""

    def __init__(self, model: UncertainModel, mean: np.ndarray, cov: np.ndarray):
        self.model = model
        self.mean = np.asarray(mean, dtype=float).copy()
        self.cov = np.asarray(cov, dtype=float).copy()

    @classmethod
    def from_posterior(cls, model: UncertainModel, posterior: SmoothedPosterior) -> "KalmanTracker":
        return cls(model, posterior.means[-1], posterior.covs[-1])

    def predict(self, exog: np.ndarray, on: bool) -> None:
        self.mean = self.model.step_mean(self.mean, np.asarray(exog, dtype=float), on)
        self.cov = self.model.a_bar @ self.cov @ self.model.a_bar.T + self.model.q_cov

    def update(self, y: float) -> None:
        s = float(L @ self.cov @ L) + self.model.r_var
        if not s > 0:
            raise NumericalBreakdown(f"innovation variance {s} is not positive")
        gain = self.cov @ L / s
        self.mean = self.mean + gain * (y - self.mean[0])
        self.cov = _symmetrize((np.eye(2) - np.outer(gain, L)) @ self.cov)

    def step(self, y: float, exog_prev: np.ndarray, on_prev: bool) -> None:
        self.predict(exog_prev, on_prev)
        self.update(y)


def draw_noise(rng: np.random.Generator, cov: np.ndarray, kind: NoiseKind, size: int) -> np.ndarray:
    dim = cov.shape[0]
    vals, vecs = np.linalg.eigh(_symmetrize(cov))
    root = vecs @ np.diag(np.sqrt(np.maximum(vals, 0.0)))
    if NoiseKind(kind) is NoiseKind.UNIFORM:
        # Unit-variance uniform draws.
        z = rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), size=(size, dim))
    else:
        z = rng.standard_normal((size, dim))
    return z @ root.T


def simulate_measurements(
    model: UncertainModel,
    exog: np.ndarray,
    rng: np.random.Generator,
    modes: Optional[Sequence[bool]] = None,
    setpoint: Optional[float] = None,
    deadband: float = 1.0,
    noise: NoiseKind = NoiseKind.GAUSSIAN,
    initial_on: bool = False,
) -> Tuple[MeasurementLog, np.ndarray]:
    """Synthetic measurement log and the true states behind it.

    Relay states are taken from ``modes`` when given; otherwise a cooling
    thermostat at ``setpoint`` switches on the true air temperature.
    """
    exog = np.asarray(exog, dtype=float).reshape(-1, 2)
    n = len(exog)
    if modes is None and setpoint is None:
        raise InvalidParameters("either modes or a setpoint is required")
    w = draw_noise(rng, model.q_cov, noise, n)
    v = draw_noise(rng, np.array([[model.r_var]]), noise, n)[:, 0]
    eta = model.m0 + draw_noise(rng, model.p0, noise, 1)[0]

    states = np.empty((n, 2))
    out_modes = np.empty(n, dtype=bool)
    on = initial_on
    half = deadband / 2.0
    for k in range(n):
        if k > 0:
            eta = model.step_mean(eta, exog[k - 1], out_modes[k - 1]) + w[k - 1]
        states[k] = eta
        if modes is not None:
            on = bool(modes[k])
        elif eta[0] >= setpoint + half:
            on = True
        elif eta[0] <= setpoint - half:
            on = False
        out_modes[k] = on
    return MeasurementLog(states[:, 0] + v, out_modes, exog), states


def perturb_model(model: UncertainModel, rel_error: float, rng: np.random.Generator) -> UncertainModel:
    """Initial guess with every linear parameter off by a uniform factor in ±rel_error."""

    def scale(x: np.ndarray) -> np.ndarray:
        return x * (1.0 + rng.uniform(-rel_error, rel_error, size=x.shape))

    return replace(
        model,
        a_bar=scale(model.a_bar),
        b_bar=scale(model.b_bar),
        c_on=scale(model.c_on),
        c_off=scale(model.c_off),
    )
