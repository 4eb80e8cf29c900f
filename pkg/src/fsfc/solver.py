"""Dual augmented Lagrangian solver for the group elastic-net logistic model.

Outer loop: approximately minimize the augmented Lagrangian over the duals
``(V, Z)``, then update the primal multiplier ``B`` and grow ``sigma``.
Inner loop: a Newton step on ``V`` (with Armijo backtracking) alternated with
the closed-form ``Z`` update.  The Newton system only involves the feature
blocks that survive soft-thresholding, and is solved in the ``r*k``-sized
Woodbury form when that is smaller than ``n``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.linalg

from .dualops import (
    ActiveSetInfo,
    PenaltyParams,
    as_blocks,
    h_conjugate_derivatives,
    is_dual_feasible,
    logistic_loss,
    penalty_value,
    prox_blocks,
    psi_eval,
    psi_value,
)
from .exceptions import (
    ConfigError,
    DualInfeasibleError,
    LineSearchStalled,
    NewtonSystemSingular,
)
from .funcdata import ScoreMatrix

logger = logging.getLogger(__name__)

SIGMA_MAX = 1e8


@dataclass(frozen=True)
class SolverConfig:
    """Solver tolerances and caps.

    ``sigma0``/``sigma_growth`` left as ``None`` are derived from the
    relative penalty level ``c = lambda1 / lambda_max`` by
    :func:`sigma_schedule`.
    """

    tol: float = 1e-4
    mu: float = 0.2
    sigma0: float | None = None
    sigma_growth: float | None = None
    sigma_max: float = SIGMA_MAX
    max_outer: int = 100
    max_inner: int = 50
    max_linesearch_halvings: int = 50

    def __post_init__(self):
        if not self.tol > 0:
            raise ConfigError(f"tol must be positive, got {self.tol}")
        if not 0 < self.mu < 0.5:
            raise ConfigError(f"mu must lie in (0, 0.5), got {self.mu}")
        if self.sigma0 is not None and not self.sigma0 > 0:
            raise ConfigError(f"sigma0 must be positive, got {self.sigma0}")
        if self.sigma_growth is not None and not self.sigma_growth >= 1:
            raise ConfigError(f"sigma_growth must be >= 1, got {self.sigma_growth}")
        for name in ("max_outer", "max_inner", "max_linesearch_halvings"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")


def sigma_schedule(c_lambda: float, lambda_max: float):
    """Initial ``sigma`` and its per-iteration growth factor."""
    sigma0 = 0.1 * c_lambda / lambda_max if lambda_max > 0 else 1.0
    growth = max(min(5.0, 1.0 + 10.0 * c_lambda), 1.1)
    return sigma0, growth


@dataclass
class SolverState:
    V: np.ndarray
    Z: np.ndarray
    B: np.ndarray
    sigma: float
    outer_iter: int = 0
    inner_iter_total: int = 0
    newton_iter_total: int = 0


@dataclass(frozen=True)
class TraceRecord:
    outer: int
    inner: int
    sigma: float
    kkt: float
    active: int
    psi: float
    primal: float


@dataclass(frozen=True, eq=False)
class SolveReport:
    B: np.ndarray
    V: np.ndarray
    Z: np.ndarray
    kkt_residual: float
    active_features: np.ndarray
    converged: bool
    outer_iter: int
    inner_iter_total: int
    newton_iter_total: int
    wall_time: float
    newton_time: float
    sigma: float
    lambda1: float
    lambda2: float
    weights: np.ndarray
    trace: list = field(default_factory=list)
    stalls: int = 0

    def coef_blocks(self, k: int) -> np.ndarray:
        return as_blocks(self.B, k)

    @property
    def objective(self) -> float:
        return self.trace[-1].primal if self.trace else float("nan")


def kkt_residual(XtV: np.ndarray, V: np.ndarray, Z: np.ndarray, k: int) -> float:
    """Standardized norm of the dual constraint ``X^T V + Z = 0``."""
    resid = np.linalg.norm(as_blocks(XtV + Z, k), axis=1).sum()
    scale = 1.0 + np.linalg.norm(V) + np.linalg.norm(as_blocks(Z, k), axis=1).sum()
    return float(resid / scale)


def z_update(V, B, sigma, X: ScoreMatrix, params: PenaltyParams, XtV=None) -> np.ndarray:
    """Closed-form minimizer of the augmented Lagrangian over ``Z``."""
    if XtV is None:
        XtV = X.T @ V
    params = params.with_sigma(sigma)
    T = np.asarray(B, dtype=float) - sigma * XtV
    return (T - prox_blocks(T, params, X.k)) / sigma


def _inverse_q_blocks(active: ActiveSetInfo, params: PenaltyParams, k: int):
    """Closed-form inverses of the prox Jacobian blocks, or ``None`` if singular."""
    idx = active.indices
    T = as_blocks(active.T, k)[idx]
    norms = active.block_norms[idx]
    w = params.weights[idx]
    a = params.sigma * w * params.lambda1 / norms
    gap = 1.0 - a
    if np.any(gap <= 1e-12):
        return None
    ridge = 1.0 + params.sigma * w * params.lambda2
    u = T / norms[:, None]
    proj = u[:, :, None] * u[:, None, :]
    eye = np.eye(k)[None]
    return ridge[:, None, None] * ((eye - proj) / gap[:, None, None] + proj)


def newton_direction(
    active: ActiveSetInfo,
    grad: np.ndarray,
    hess_diag: np.ndarray,
    X: ScoreMatrix,
    params: PenaltyParams,
    route: str = "auto",
) -> np.ndarray:
    """Solve ``(H_h* + sigma X_J Q_J X_J^T) D = -grad``.

    ``route`` is ``"auto"`` (Woodbury when ``r*k < n``), ``"smw"`` or
    ``"direct"``.  A singular Woodbury core falls back to the direct route.
    """
    k = X.k
    n = grad.size
    r = active.r
    if r == 0:
        return -grad / hess_diag
    sigma = params.sigma
    XJt = active.XJt if active.XJt is not None else X.block_rows(active.indices)  # (r*k, n)
    use_smw = route == "smw" or (route == "auto" and r * k < n)

    if use_smw:
        q_inv = _inverse_q_blocks(active, params, k)
        if q_inv is not None:
            XJt_h = XJt / hess_diag
            core = XJt_h @ XJt.T
            core_view = core.reshape(r, k, r, k)
            for b in range(r):
                core_view[b, :, b, :] += q_inv[b] / sigma
            try:
                factor = scipy.linalg.cho_factor(core, lower=True, check_finite=False)
            except np.linalg.LinAlgError:
                logger.debug("Woodbury core of size %d not positive definite; using direct route", r * k)
            else:
                base = -grad / hess_diag
                corr = scipy.linalg.cho_solve(factor, XJt @ base, check_finite=False)
                return base - corr @ XJt_h
        if route == "smw":
            logger.debug("singular prox Jacobian block; falling back to the direct route")

    QXt = np.matmul(active.q_blocks, XJt.reshape(r, k, n)).reshape(r * k, n)
    H = sigma * (XJt.T @ QXt)
    H[np.diag_indices(n)] += hess_diag
    try:
        factor = scipy.linalg.cho_factor(H, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NewtonSystemSingular(f"Newton system of size {n} is singular") from exc
    return scipy.linalg.cho_solve(factor, -grad, check_finite=False)


def hessian_matvec(active: ActiveSetInfo, hess_diag, X: ScoreMatrix, params: PenaltyParams, vec):
    """Product of the (generalized) Hessian of ``psi`` with ``vec``."""
    out = hess_diag * vec
    if active.r:
        XJt = active.XJt if active.XJt is not None else X.block_rows(active.indices)
        w = (XJt @ vec).reshape(active.r, X.k)
        w = np.matmul(active.q_blocks, w[:, :, None]).ravel()
        out = out + params.sigma * (w @ XJt)
    return out


def line_search(
    V: np.ndarray,
    D: np.ndarray,
    labels: np.ndarray,
    phi: Callable[[float, np.ndarray], float],
    phi0: float,
    slope: float,
    mu: float = 0.2,
    max_halvings: int = 50,
):
    """Armijo backtracking from a unit step, halving on failure.

    ``phi(s, V_trial)`` returns ``psi(V_trial)``; it is only called on
    dual-feasible trial points, infeasible ones are rejected outright.

    Returns
    -------
    step : float
    V_new : ndarray
    """
    step = 1.0
    for _ in range(max_halvings + 1):
        trial = V + step * D
        if is_dual_feasible(trial, labels):
            try:
                value = phi(step, trial)
            except DualInfeasibleError:
                value = np.inf
            if value <= phi0 + mu * step * slope:
                return step, trial
        step *= 0.5
    raise LineSearchStalled(
        f"Armijo condition not met after {max_halvings} halvings "
        f"(psi0={phi0:.6g}, slope={slope:.3g})",
        step=step,
        psi0=phi0,
        slope=slope,
    )


@dataclass
class InnerResult:
    newton_steps: int
    hit_cap: bool
    psi: float
    XtV: np.ndarray
    newton_time: float = 0.0


def inner_solve(state: SolverState, X: ScoreMatrix, labels, params: PenaltyParams,
                config: SolverConfig, XtV=None) -> InnerResult:
    """Alternate Newton steps on ``V`` and closed-form ``Z`` updates in place.

    Stops once ``||grad psi|| <= 2 sqrt(sigma) sum_j ||(X^T V + Z)_j||`` with
    both sides taken at the current iterate.
    """
    k = X.k
    params = params.with_sigma(state.sigma)
    if XtV is None:
        XtV = X.T @ state.V
    state.Z = z_update(state.V, state.B, state.sigma, X, params, XtV)
    steps = 0
    newton_time = 0.0
    psi_val = np.nan
    tiny = np.sqrt(np.finfo(float).eps)
    while True:
        psi_val, grad, active = psi_eval(state.V, labels, state.B, X, params, XtV)
        resid = np.linalg.norm(as_blocks(XtV + state.Z, k), axis=1).sum()
        gnorm = np.linalg.norm(grad)
        if gnorm <= 2.0 * np.sqrt(state.sigma) * resid or gnorm <= tiny * 1e-4:
            return InnerResult(steps, False, psi_val, XtV, newton_time)
        if steps >= config.max_inner:
            return InnerResult(steps, True, psi_val, XtV, newton_time)

        _, hess = h_conjugate_derivatives(state.V, labels)
        t0 = time.perf_counter()
        D = newton_direction(active, grad, hess, X, params)
        newton_time += time.perf_counter() - t0
        XtD = X.T @ D
        slope = float(grad @ D)

        def phi(s, V_trial):
            return psi_value(V_trial, labels, state.B, XtV + s * XtD, params, k)

        step, state.V = line_search(
            state.V, D, labels, phi, psi_val, slope,
            mu=config.mu, max_halvings=config.max_linesearch_halvings,
        )
        XtV = XtV + step * XtD
        state.Z = z_update(state.V, state.B, state.sigma, X, params, XtV)
        steps += 1
        state.newton_iter_total += 1


def initial_state(X: ScoreMatrix, labels, sigma0: float, params: PenaltyParams) -> SolverState:
    V = -0.5 * np.asarray(labels, dtype=float)
    B = np.zeros(X.p * X.k)
    Z = z_update(V, B, sigma0, X, params)
    return SolverState(V=V, Z=Z, B=B, sigma=sigma0)


def dal_fit(
    X: ScoreMatrix,
    labels,
    lambda1: float,
    lambda2: float,
    weights=None,
    init=None,
    config: SolverConfig | None = None,
    lambda_max_value: float | None = None,
) -> SolveReport:
    """Fit the penalized logistic model at one ``(lambda1, lambda2)``.

    Parameters
    ----------
    X : ScoreMatrix
    labels : (n,) array in {-1, 1}
    lambda1, lambda2 : float
        Group-lasso and ridge levels; both must be positive.
    weights : (p,) array, optional
        Feature weights, default all ones.
    init : SolverState or SolveReport, optional
        Warm start; ``V`` and ``B`` are reused, ``sigma`` restarts.
    config : SolverConfig, optional
    lambda_max_value : float, optional
        Used for the default ``sigma`` schedule; computed when omitted.
    """
    t_start = time.perf_counter()
    config = config or SolverConfig()
    labels = np.asarray(labels, dtype=float)
    if labels.shape != (X.n,) or not np.all(np.abs(labels) == 1):
        raise ConfigError("labels must be an n-vector of -1/+1")
    if not lambda2 > 0:
        raise ConfigError("lambda2 must be positive")
    weights = np.ones(X.p) if weights is None else np.asarray(weights, dtype=float)
    if weights.shape != (X.p,):
        raise ConfigError(f"expected {X.p} weights, got shape {weights.shape}")

    if config.sigma0 is None or config.sigma_growth is None:
        if lambda_max_value is None:
            from .selection import lambda_max as _lambda_max
            lambda_max_value = _lambda_max(X, labels, weights)
        c_lambda = lambda1 / lambda_max_value if lambda_max_value > 0 else 1.0
        s0, growth = sigma_schedule(c_lambda, lambda_max_value)
        config = replace(
            config,
            sigma0=config.sigma0 if config.sigma0 is not None else s0,
            sigma_growth=config.sigma_growth if config.sigma_growth is not None else growth,
        )
    params = PenaltyParams(lambda1, lambda2, weights, config.sigma0)
    k = X.k

    if init is None:
        state = initial_state(X, labels, config.sigma0, params)
    else:
        V0 = np.array(init.V, dtype=float)
        if not is_dual_feasible(V0, labels):
            raise DualInfeasibleError("warm-start V is not dual-feasible")
        B0 = np.array(init.B, dtype=float)
        B0[np.repeat(np.isinf(weights), k)] = 0.0
        state = SolverState(V=V0, Z=np.zeros_like(B0), B=B0, sigma=config.sigma0)

    trace = []
    stalls = 0
    newton_time = 0.0
    XtV = X.T @ state.V
    best = None
    converged = False
    kkt = np.inf
    for outer in range(1, config.max_outer + 1):
        try:
            inner = inner_solve(state, X, labels, params, config, XtV)
            XtV = inner.XtV
            newton_time += inner.newton_time
            state.inner_iter_total += inner.newton_steps
            psi_last = inner.psi
            if inner.hit_cap:
                logger.debug("inner solve hit max_inner=%d at outer %d", config.max_inner, outer)
        except (LineSearchStalled, NewtonSystemSingular) as exc:
            logger.debug("inner solve stalled at outer %d: %s", outer, exc)
            stalls += 1
            XtV = X.T @ state.V
            state.Z = z_update(state.V, state.B, state.sigma, X, params, XtV)
            psi_last = np.nan

        # B - sigma (X^T V + Zbar) equals the prox of T; using the prox keeps
        # inactive blocks exactly zero
        step_params = params.with_sigma(state.sigma)
        state.B = prox_blocks(state.B - state.sigma * XtV, step_params, k)
        state.outer_iter = outer
        kkt = kkt_residual(XtV, state.V, state.Z, k)
        active = np.flatnonzero(np.linalg.norm(as_blocks(state.B, k), axis=1) > 0)
        primal = logistic_loss(X.margins(state.B), labels) + penalty_value(state.B, params, k)
        trace.append(TraceRecord(outer, state.inner_iter_total, state.sigma, kkt, active.size, psi_last, primal))
        if best is None or kkt < best[0]:
            best = (kkt, state.V.copy(), state.Z.copy(), state.B.copy(), active)
        if kkt < config.tol:
            converged = True
            break
        state.sigma = min(state.sigma * config.sigma_growth, config.sigma_max)

    if converged:
        V, Z, B, active = state.V, state.Z, state.B, active
    else:
        kkt, V, Z, B, active = best
    return SolveReport(
        B=B, V=V, Z=Z,
        kkt_residual=kkt,
        active_features=active,
        converged=converged,
        outer_iter=state.outer_iter,
        inner_iter_total=state.inner_iter_total,
        newton_iter_total=state.newton_iter_total,
        wall_time=time.perf_counter() - t_start,
        newton_time=newton_time,
        sigma=state.sigma,
        lambda1=lambda1,
        lambda2=lambda2,
        weights=weights,
        trace=trace,
        stalls=stalls,
    )
