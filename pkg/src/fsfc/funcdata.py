"""Functional data on a shared grid: standardization, FPCs and score matrices.

Curves are stored as an ``(n, p, m)`` array (instances x features x grid
points).  Every L2 inner product is approximated with trapezoid weights on
the grid, so the eigenfunctions returned by :func:`compute_fpc` are exactly
orthonormal under that quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.linalg

from .exceptions import DataError

SD_FLOOR = 1e-10


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Ordered evaluation points on ``[0, 1]`` with trapezoid weights."""

    points: np.ndarray
    weights: np.ndarray = field(init=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise DataError("a time grid needs at least two points")
        if not np.all(np.diff(pts) > 0):
            raise DataError("grid points must be strictly increasing")
        if abs(pts[0]) > 1e-12 or abs(pts[-1] - 1.0) > 1e-12:
            raise DataError(f"grid must span [0, 1], got [{pts[0]}, {pts[-1]}]")
        pts = pts.copy()
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", trapezoid_weights(pts))

    @classmethod
    def uniform(cls, m: int) -> "TimeGrid":
        return cls(np.linspace(0.0, 1.0, m))

    @property
    def m(self) -> int:
        return self.points.size

    def same_as(self, other: "TimeGrid", atol: float = 1e-12) -> bool:
        return self.m == other.m and bool(np.allclose(self.points, other.points, rtol=0, atol=atol))


def trapezoid_weights(points: np.ndarray) -> np.ndarray:
    gaps = np.diff(points)
    w = np.zeros_like(points)
    w[:-1] += gaps / 2
    w[1:] += gaps / 2
    w.flags.writeable = False
    return w


@dataclass(frozen=True, eq=False)
class CurvePanel:
    """``n`` instances of ``p`` functional features evaluated on ``grid``."""

    values: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 3:
            raise DataError(f"panel values must be (n, p, m), got shape {vals.shape}")
        if vals.shape[2] != self.grid.m:
            raise DataError(
                f"panel has {vals.shape[2]} grid points but the grid has {self.grid.m}"
            )
        if not np.all(np.isfinite(vals)):
            raise DataError("panel contains non-finite values")
        object.__setattr__(self, "values", vals)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    @property
    def m(self) -> int:
        return self.values.shape[2]

    def subset(self, rows=None, features=None) -> "CurvePanel":
        vals = self.values
        if rows is not None:
            vals = vals[np.asarray(rows)]
        if features is not None:
            vals = vals[:, np.asarray(features)]
        return CurvePanel(vals, self.grid)


@dataclass(frozen=True, eq=False)
class Standardization:
    """Pointwise mean/sd curves per feature, shape ``(p, m)`` each.

    ``degenerate`` marks grid points whose sd fell below the floor and was
    replaced by 1.
    """

    mean: np.ndarray
    sd: np.ndarray
    degenerate: np.ndarray

    @property
    def degenerate_features(self) -> np.ndarray:
        return np.flatnonzero(self.degenerate.any(axis=1))

    def apply(self, panel: CurvePanel) -> CurvePanel:
        if panel.values.shape[1:] != self.mean.shape:
            raise DataError(
                f"panel features/grid {panel.values.shape[1:]} do not match "
                f"standardization {self.mean.shape}"
            )
        return CurvePanel((panel.values - self.mean) / self.sd, panel.grid)


def standardize_panel(panel: CurvePanel, sd_floor: float = SD_FLOOR):
    """Center and scale each feature pointwise across instances.

    Uses the sample standard deviation (``ddof=1``).  Points whose sd is
    below ``sd_floor`` are only centered (sd replaced by 1) and flagged.

    Returns
    -------
    standardized : CurvePanel
    stats : Standardization
        Reusable on held-out data via :meth:`Standardization.apply`.
    """
    if panel.n < 2:
        raise DataError("standardization needs at least two instances")
    mean = panel.values.mean(axis=0)
    sd = panel.values.std(axis=0, ddof=1)
    degenerate = sd < sd_floor
    sd = np.where(degenerate, 1.0, sd)
    stats = Standardization(mean, sd, degenerate)
    return stats.apply(panel), stats


@dataclass(frozen=True, eq=False)
class FpcBasis:
    """First ``k`` functional principal components of one feature.

    ``eigenfunctions`` has shape ``(k, m)``; rows are orthonormal under the
    trapezoid inner product of ``grid``.
    """

    feature_index: int
    eigenfunctions: np.ndarray
    eigenvalues: np.ndarray
    variance_explained: float
    grid: TimeGrid
    rank_deficient: bool = False

    @property
    def k(self) -> int:
        return self.eigenfunctions.shape[0]

    def gram(self) -> np.ndarray:
        e = self.eigenfunctions
        return (e * self.grid.weights) @ e.T


def _weighted_covariances(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Return ``W^1/2 C W^1/2`` for each feature, shape ``(p, m, m)``."""
    n = values.shape[0]
    centered = values - values.mean(axis=0)
    scaled = np.transpose(centered, (1, 0, 2)) * np.sqrt(weights)
    denom = max(n - 1, 1)
    return np.matmul(np.transpose(scaled, (0, 2, 1)), scaled) / denom


def _fpc_from_weighted_cov(cov_w, k, weights, grid, feature_index) -> FpcBasis:
    m = cov_w.shape[0]
    vals, vecs = scipy.linalg.eigh(cov_w, subset_by_index=[m - k, m - 1])
    vals = vals[::-1]
    vecs = vecs[:, ::-1]
    total = float(np.trace(cov_w))
    zero_tol = 10 * m * np.finfo(float).eps * max(total, np.finfo(float).tiny)
    null = vals <= zero_tol
    vals = np.where(null, 0.0, vals)

    efuns = (vecs / np.sqrt(weights)[:, None]).T
    # deterministic sign: largest-magnitude entry positive
    pivot = np.argmax(np.abs(efuns), axis=1)
    signs = np.sign(efuns[np.arange(k), pivot])
    signs[signs == 0] = 1.0
    efuns = efuns * signs[:, None]

    explained = float(vals.sum() / total) if total > zero_tol else 0.0
    return FpcBasis(
        feature_index=feature_index,
        eigenfunctions=efuns,
        eigenvalues=vals,
        variance_explained=min(explained, 1.0),
        grid=grid,
        rank_deficient=bool(null.any()),
    )


def compute_fpc(panel: CurvePanel, j: int, k: int = 5) -> FpcBasis:
    """FPC basis of feature ``j`` from the pointwise sample covariance."""
    return compute_fpc_all(panel, k, features=[j])[0]


def compute_fpc_all(panel: CurvePanel, k: int = 5, features: Sequence[int] | None = None):
    """FPC bases for several features (all of them by default)."""
    if k < 1 or k > min(panel.n, panel.m):
        raise DataError(f"k={k} must lie in [1, min(n, m)] = [1, {min(panel.n, panel.m)}]")
    idx = np.arange(panel.p) if features is None else np.asarray(features, dtype=int)
    w = panel.grid.weights
    bases = []
    # chunked to bound the (chunk, m, m) covariance stack
    chunk = max(1, 4_000_000 // (panel.m * max(panel.n, panel.m)))
    for start in range(0, idx.size, chunk):
        sel = idx[start:start + chunk]
        covs = _weighted_covariances(panel.values[:, sel, :], w)
        for local, j in enumerate(sel):
            bases.append(_fpc_from_weighted_cov(covs[local], k, w, panel.grid, int(j)))
    return bases


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    """Block design ``[X_1 | ... | X_p]`` with ``n x k`` blocks."""

    data: np.ndarray
    p: int
    k: int

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] != self.p * self.k:
            raise DataError(
                f"score matrix shape {self.data.shape} inconsistent with p={self.p}, k={self.k}"
            )

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @cached_property
    def T(self) -> np.ndarray:
        """Contiguous transpose; row gathers of blocks are cheap on it."""
        return np.ascontiguousarray(self.data.T)

    def block_rows(self, features) -> np.ndarray:
        """``X_J^T`` for the listed blocks, shape ``(len(features) * k, n)``."""
        feats = np.asarray(features, dtype=int)
        return self.T.reshape(self.p, self.k, self.n)[feats].reshape(-1, self.n)

    def margins(self, B) -> np.ndarray:
        """``X @ B`` touching only the nonzero blocks of ``B``."""
        blocks = np.asarray(B, dtype=float).reshape(self.p, self.k)
        nz = np.flatnonzero(np.any(blocks != 0, axis=1))
        if nz.size == 0:
            return np.zeros(self.n)
        return blocks[nz].ravel() @ self.block_rows(nz)

    def block(self, j: int) -> np.ndarray:
        return self.data[:, j * self.k:(j + 1) * self.k]

    def blocks(self, features) -> "ScoreMatrix":
        feats = np.asarray(features, dtype=int)
        cols = (feats[:, None] * self.k + np.arange(self.k)).ravel()
        return ScoreMatrix(self.data[:, cols], feats.size, self.k)

    def rows(self, idx) -> "ScoreMatrix":
        return ScoreMatrix(self.data[np.asarray(idx)], self.p, self.k)


def stack_eigenfunctions(bases: Sequence[FpcBasis]) -> np.ndarray:
    return np.stack([b.eigenfunctions for b in bases])


def compute_scores(panel: CurvePanel, bases: Sequence[FpcBasis]) -> ScoreMatrix:
    """Quadrature inner products of every curve with its feature's FPCs."""
    if len(bases) != panel.p:
        raise DataError(f"{len(bases)} bases supplied for {panel.p} features")
    ks = {b.k for b in bases}
    if len(ks) != 1:
        raise DataError("all features must use the same number of components")
    for b in bases:
        if not b.grid.same_as(panel.grid):
            raise DataError(f"basis of feature {b.feature_index} was built on a different grid")
    k = ks.pop()
    efuns = stack_eigenfunctions(bases) * panel.grid.weights  # (p, k, m)
    scores = np.einsum("ijt,jst->ijs", panel.values, efuns, optimize=True)
    return ScoreMatrix(scores.reshape(panel.n, panel.p * k), panel.p, k)


def reconstruct_coefficient_curve(coef: np.ndarray, basis: FpcBasis) -> np.ndarray:
    """Evaluate ``sum_s coef[s] * e_s(t)`` on the basis grid."""
    coef = np.asarray(coef, dtype=float)
    if coef.shape != (basis.k,):
        raise DataError(f"coefficient block has shape {coef.shape}, expected ({basis.k},)")
    return coef @ basis.eigenfunctions
