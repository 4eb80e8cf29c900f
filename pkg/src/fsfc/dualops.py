"""Losses, penalties, conjugates and proximal maps for the group elastic net.

Vectors indexed by feature blocks (``B``, ``Z``, ``T``) are flat arrays of
length ``p * k``; helpers reshape them to ``(p, k)`` internally.

The dual variable ``V`` lives in the open box ``Y_i V_i in (-1, 0)``.  Outside
of it the conjugate of the logistic loss is ``+inf``; functions here raise
:class:`~fsfc.exceptions.DualInfeasibleError` instead of returning a value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DualInfeasibleError

LOG_GUARD = 1e-12
_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class PenaltyParams:
    """Penalty levels, per-feature weights and the augmented Lagrangian ``sigma``.

    ``weights`` may contain ``inf`` to exclude a feature (its block is forced
    to zero).
    """

    lambda1: float
    lambda2: float
    weights: np.ndarray
    sigma: float = 1.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        if not self.lambda1 > 0:
            raise ConfigError(f"lambda1 must be positive, got {self.lambda1}")
        if not self.lambda2 >= 0:
            raise ConfigError(f"lambda2 must be nonnegative, got {self.lambda2}")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if w.ndim != 1 or np.any(~(w > 0)):
            raise ConfigError("weights must be a 1-d array of positive values")

    def with_sigma(self, sigma: float) -> "PenaltyParams":
        return PenaltyParams(self.lambda1, self.lambda2, self.weights, sigma)


@dataclass(frozen=True, eq=False)
class ActiveSetInfo:
    """Blocks of ``T = B - sigma X^T V`` that survive soft-thresholding.

    ``q_blocks[i]`` is the ``k x k`` Jacobian block of the prox for feature
    ``indices[i]``; ``XJt`` caches the gathered rows ``X_J^T``.
    """

    indices: np.ndarray
    T: np.ndarray
    block_norms: np.ndarray
    q_blocks: np.ndarray
    XJt: np.ndarray | None = None

    @property
    def r(self) -> int:
        return self.indices.size


def as_blocks(vec: np.ndarray, k: int) -> np.ndarray:
    vec = np.asarray(vec, dtype=float)
    if vec.size % k:
        raise ValueError(f"vector of length {vec.size} is not a multiple of k={k}")
    return vec.reshape(-1, k)


def block_norms(vec: np.ndarray, k: int) -> np.ndarray:
    return np.linalg.norm(as_blocks(vec, k), axis=1)


def logistic_loss(margins: np.ndarray, labels: np.ndarray) -> float:
    """``sum_i log(1 + exp(-y_i f_i))`` without overflow."""
    return float(np.logaddexp(0.0, -np.asarray(labels) * np.asarray(margins)).sum())


def penalty_value(B: np.ndarray, params: PenaltyParams, k: int) -> float:
    norms = block_norms(B, k)
    w = params.weights
    excluded = np.isinf(w)
    if np.any(norms[excluded] > 0):
        bad = np.flatnonzero(excluded & (norms > 0))
        raise ValueError(f"blocks {bad.tolist()} have infinite weight but nonzero coefficients")
    keep = ~excluded
    per_block = w[keep] * (params.lambda1 * norms[keep] + 0.5 * params.lambda2 * norms[keep] ** 2)
    return float(per_block.sum())


def _shrink_factors(norms, sigma, weights, lambda1, lambda2):
    with np.errstate(divide="ignore", invalid="ignore"):
        thresh = sigma * weights * lambda1
        scale = 1.0 - thresh / norms
        ridge = np.where(np.isinf(weights), 1.0, 1.0 + sigma * weights * lambda2)
    # round-off right at the threshold stays inside the dead zone
    scale = np.where((norms > 0) & (scale > 4 * _EPS), scale, 0.0)
    scale = np.where(np.isinf(weights), 0.0, scale)
    return scale / ridge, thresh, ridge


def prox_group(block, sigma, omega, lambda1, lambda2) -> np.ndarray:
    """Block soft-thresholding with ridge scaling for a single group."""
    block = np.asarray(block, dtype=float)
    factor, _, _ = _shrink_factors(
        np.array([np.linalg.norm(block)]), sigma, np.array([float(omega)]), lambda1, lambda2
    )
    return factor[0] * block


def prox_blocks(T: np.ndarray, params: PenaltyParams, k: int) -> np.ndarray:
    """Apply :func:`prox_group` to every block of a flat vector."""
    blocks = as_blocks(T, k)
    norms = np.linalg.norm(blocks, axis=1)
    factor, _, _ = _shrink_factors(
        norms, params.sigma, params.weights, params.lambda1, params.lambda2
    )
    return (blocks * factor[:, None]).ravel()


def pi_conjugate(Z: np.ndarray, weights: np.ndarray, lambda1: float, lambda2: float, k: int) -> float:
    if not lambda2 > 0:
        raise ConfigError("the penalty conjugate requires lambda2 > 0")
    weights = np.asarray(weights, dtype=float)
    norms = block_norms(Z, k)
    finite = np.isfinite(weights)
    excess = np.maximum(norms[finite] - weights[finite] * lambda1, 0.0)
    return float(np.sum(excess ** 2 / (2 * weights[finite] * lambda2)))


def dual_margin(V: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """``u_i = -Y_i V_i``, which must lie in ``(0, 1)``."""
    return -np.asarray(labels) * np.asarray(V)


def is_dual_feasible(V: np.ndarray, labels: np.ndarray) -> bool:
    u = dual_margin(V, labels)
    return bool(np.all((u > 0) & (u < 1)))


def _checked_margin(V, labels):
    u = dual_margin(V, labels)
    bad = ~((u > 0) & (u < 1))
    if np.any(bad):
        raise DualInfeasibleError(
            f"dual-infeasible point: {int(bad.sum())} entries outside Y*V in (-1, 0)"
        )
    return np.clip(u, LOG_GUARD, 1 - LOG_GUARD)


def _xlogx(x):
    return np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0)), 0.0)


def h_conjugate(V: np.ndarray, labels: np.ndarray) -> float:
    """Conjugate of the logistic loss: negative binary entropy of ``-Y V``."""
    u = _checked_margin(V, labels)
    return float(np.sum(_xlogx(u) + _xlogx(1 - u)))


def h_conjugate_derivatives(V: np.ndarray, labels: np.ndarray):
    """Gradient and (diagonal) Hessian of :func:`h_conjugate`.

    With ``u = -Y V`` the gradient is ``Y * log((1 - u) / u)``, the logit of
    the maximizing margin, and the Hessian diagonal is ``1 / (u (1 - u))``.
    """
    labels = np.asarray(labels, dtype=float)
    u = _checked_margin(V, labels)
    grad = labels * (np.log1p(-u) - np.log(u))
    hess = 1.0 / (u * (1 - u))
    return grad, hess


def _prox_jacobian_blocks(T_blocks, norms, idx, params):
    w = params.weights[idx]
    a = params.sigma * w * params.lambda1 / norms[idx]
    ridge = 1.0 + params.sigma * w * params.lambda2
    k = T_blocks.shape[1]
    Tj = T_blocks[idx]
    outer = Tj[:, :, None] * Tj[:, None, :] / norms[idx, None, None] ** 2
    eye = np.eye(k)[None]
    return ((1 - a)[:, None, None] * eye + a[:, None, None] * outer) / ridge[:, None, None]


def psi_value(V, labels, B, XtV, params: PenaltyParams, k: int) -> float:
    """Value of the dual augmented Lagrangian minimized over ``Z``.

    ``XtV`` must equal ``X.T @ V``; callers pass it to avoid recomputation.
    """
    T = np.asarray(B) - params.sigma * XtV
    prox = as_blocks(prox_blocks(T, params, k), k)
    _, _, ridge = _shrink_factors(
        np.ones(params.weights.size), params.sigma, params.weights, params.lambda1, params.lambda2
    )
    quad = ridge * np.sum(prox ** 2, axis=1) - np.sum(as_blocks(B, k) ** 2, axis=1)
    return h_conjugate(V, labels) + float(quad.sum()) / (2 * params.sigma)


def psi_eval(V, labels, B, X, params: PenaltyParams, XtV=None):
    """Value, gradient and active set of ``psi(V) = L_sigma(V, Zbar(V), B)``.

    Parameters
    ----------
    V : (n,) ndarray
        Dual iterate, must be dual-feasible.
    labels : (n,) ndarray in {-1, 1}
    B : (p*k,) ndarray
        Primal multiplier.
    X : ScoreMatrix
    params : PenaltyParams
    XtV : ndarray, optional
        Precomputed ``X.T @ V``.

    Returns
    -------
    value : float
    grad : (n,) ndarray
    active : ActiveSetInfo
    """
    k = X.k
    if XtV is None:
        XtV = X.T @ V
    T = np.asarray(B, dtype=float) - params.sigma * XtV
    T_blocks = as_blocks(T, k)
    norms = np.sqrt(np.einsum("ij,ij->i", T_blocks, T_blocks))
    factor, thresh, ridge = _shrink_factors(
        norms, params.sigma, params.weights, params.lambda1, params.lambda2
    )
    prox = T_blocks * factor[:, None]

    labels = np.asarray(labels, dtype=float)
    u = _checked_margin(V, labels)
    h_val = float(np.sum(_xlogx(u) + _xlogx(1 - u)))
    grad_h = labels * (np.log1p(-u) - np.log(u))
    B_blocks = as_blocks(B, k)
    quad = ridge * np.einsum("ij,ij->i", prox, prox) - np.einsum("ij,ij->i", B_blocks, B_blocks)
    value = h_val + float(quad.sum()) / (2 * params.sigma)

    idx = np.flatnonzero((norms >= thresh) & (norms > 0) & np.isfinite(params.weights))
    XJt = X.block_rows(idx)
    if idx.size:
        grad = grad_h - prox[idx].ravel() @ XJt
        q_blocks = _prox_jacobian_blocks(T_blocks, norms, idx, params)
    else:
        grad = grad_h
        q_blocks = np.zeros((0, k, k))
    active = ActiveSetInfo(indices=idx, T=T, block_norms=norms, q_blocks=q_blocks, XJt=XJt)
    return value, grad, active


def augmented_lagrangian(V, Z, B, X, labels, params: PenaltyParams) -> float:
    """Direct evaluation of ``L_sigma(V, Z, B)``."""
    resid = X.T @ V + Z
    return (
        h_conjugate(V, labels)
        + pi_conjugate(Z, params.weights, params.lambda1, params.lambda2, X.k)
        - float(np.dot(B, resid))
        + 0.5 * params.sigma * float(np.dot(resid, resid))
    )


def objective_values(B, V, Z, X, labels, params: PenaltyParams):
    """Primal ``h(XB) + pi(B)`` and dual ``h*(V) + pi*(Z)`` objectives.

    For feasible points with ``X^T V + Z = 0`` their sum is a duality gap
    and is nonnegative.
    """
    primal = logistic_loss(X.margins(B), labels) + penalty_value(B, params, X.k)
    dual = h_conjugate(V, labels) + pi_conjugate(
        Z, params.weights, params.lambda1, params.lambda2, X.k
    )
    return primal, dual
