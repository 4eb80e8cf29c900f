"""Regularization path, cross-validated selection, adaptive refit, prediction."""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

from .dualops import as_blocks
from .exceptions import ConfigError, DataError
from .funcdata import (
    CurvePanel,
    FpcBasis,
    ScoreMatrix,
    Standardization,
    TimeGrid,
    compute_fpc_all,
    compute_scores,
    standardize_panel,
)
from .solver import SolveReport, SolverConfig, SolverState, dal_fit, sigma_schedule

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    """Hyperparameters of the full fitting pipeline."""

    k: int = 5
    alpha: float = 0.2
    n_lambda: int = 100
    c_min: float = 0.01
    folds: int = 5
    seed: int = 0
    cv_recompute_fpc: bool = True
    n_jobs: int = 1
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be at least 1, got {self.k}")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.n_lambda < 2:
            raise ConfigError("the lambda grid needs at least two points")
        if not 0 < self.c_min < 1:
            raise ConfigError(f"c_min must lie in (0, 1), got {self.c_min}")
        if self.folds < 2:
            raise ConfigError(f"folds must be at least 2, got {self.folds}")
        if self.n_jobs < 1:
            raise ConfigError("n_jobs must be at least 1")

    def as_dict(self) -> dict:
        return asdict(self)


def lambda_max(X: ScoreMatrix, labels, weights=None) -> float:
    """Smallest ``lambda1`` at which every coefficient block is zero."""
    weights = np.ones(X.p) if weights is None else np.asarray(weights, dtype=float)
    if np.any(~(weights > 0)):
        raise ConfigError("weights must be positive")
    norms = np.linalg.norm(as_blocks(X.T @ np.asarray(labels, dtype=float), X.k), axis=1)
    value = 0.5 * float(np.max(norms / weights)) if norms.size else 0.0
    if value == 0.0:
        logger.warning("X^T Y is zero: the problem is degenerate (lambda_max = 0)")
    return value


@dataclass(frozen=True, eq=False)
class LambdaGrid:
    lambda_max: float
    c_values: np.ndarray
    alpha: float

    @property
    def lambda1(self) -> np.ndarray:
        return self.c_values * self.lambda_max

    @property
    def lambda2(self) -> np.ndarray:
        return (1 - self.alpha) * self.lambda1

    def __len__(self):
        return self.c_values.size


def c_grid(n_points: int = 100, c_min: float = 0.01) -> np.ndarray:
    return np.logspace(0.0, np.log10(c_min), n_points)


def build_lambda_grid(X, labels, weights=None, alpha=0.2, n_points=100, c_min=0.01) -> LambdaGrid:
    lmax = lambda_max(X, labels, weights)
    if not lmax > 0:
        raise DataError("lambda_max is zero; no penalty path can be built")
    return LambdaGrid(lmax, c_grid(n_points, c_min), alpha)


def accuracy(margins, labels) -> float:
    pred = np.where(np.asarray(margins) > 0, 1.0, -1.0)
    return float(np.mean(pred == labels))


@dataclass(frozen=True, eq=False)
class PathRecord:
    c: float
    lambda1: float
    lambda2: float
    B: np.ndarray
    V: np.ndarray
    active: np.ndarray
    kkt_residual: float
    converged: bool
    train_accuracy: float
    report: SolveReport | None = None


@dataclass(eq=False)
class PathResult:
    grid: LambdaGrid
    records: list
    cv_mean: np.ndarray | None = None
    cv_sd: np.ndarray | None = None
    cv_fold_accuracy: np.ndarray | None = None
    fold_assignment: np.ndarray | None = None
    selected_index: int | None = None

    @property
    def active_counts(self) -> np.ndarray:
        return np.array([rec.active.size for rec in self.records])

    @property
    def selected(self) -> PathRecord:
        if self.selected_index is None:
            raise ValueError("no lambda has been selected yet")
        return self.records[self.selected_index]


def path_search(X: ScoreMatrix, labels, grid: LambdaGrid, weights=None,
                config: SolverConfig | None = None, keep_reports: bool = False) -> PathResult:
    """Solve along the decreasing lambda grid, warm-starting each fit."""
    config = config or SolverConfig()
    labels = np.asarray(labels, dtype=float)
    weights = np.ones(X.p) if weights is None else np.asarray(weights, dtype=float)
    records = []
    prev = None
    for c, l1, l2 in zip(grid.c_values, grid.lambda1, grid.lambda2):
        s0, growth = sigma_schedule(c, grid.lambda_max)
        cfg = replace(config, sigma0=config.sigma0 or s0,
                      sigma_growth=config.sigma_growth or growth)
        rep = dal_fit(X, labels, l1, l2, weights, init=prev, config=cfg,
                      lambda_max_value=grid.lambda_max)
        if not rep.converged:
            logger.info("fit at c=%.4g did not converge (kkt=%.3g)", c, rep.kkt_residual)
        records.append(PathRecord(
            c=float(c), lambda1=float(l1), lambda2=float(l2), B=rep.B, V=rep.V,
            active=rep.active_features, kkt_residual=rep.kkt_residual,
            converged=rep.converged,
            train_accuracy=accuracy(X.margins(rep.B), labels),
            report=rep if keep_reports else None,
        ))
        prev = rep
    return PathResult(grid=grid, records=records)


def _fingerprints(panel: CurvePanel) -> np.ndarray:
    flat = panel.values.reshape(panel.n, -1)
    probe = np.random.default_rng(20240101).standard_normal(flat.shape[1])
    return flat @ probe


def stratified_folds(panel: CurvePanel, labels, folds: int, seed: int) -> np.ndarray:
    """Fold index per instance, stratified by class.

    Instances are first put in a canonical order (by a content fingerprint)
    so the assignment does not depend on the row order of ``panel``.
    """
    labels = np.asarray(labels)
    n = labels.size
    if n < folds:
        raise ConfigError(f"folds ({folds}) exceeds the number of instances ({n})")
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise DataError("cross-validation needs both classes in the labels")
    if counts.min() < folds:
        raise ConfigError(
            f"the smallest class has {counts.min()} instances, fewer than folds={folds}"
        )
    keys = _fingerprints(panel)
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=int)
    for cls in classes:
        members = np.flatnonzero(labels == cls)
        members = members[np.argsort(keys[members], kind="stable")]
        members = members[rng.permutation(members.size)]
        assignment[members] = np.arange(members.size) % folds
    return assignment


def _prepare_design(panel: CurvePanel, k: int):
    std, stats = standardize_panel(panel)
    bases = compute_fpc_all(std, k)
    return compute_scores(std, bases), bases, stats


def _fold_accuracies(fold, panel, labels, assignment, config: PipelineConfig, shared_X, weights):
    train = assignment != fold
    test = ~train
    ytr, yte = labels[train], labels[test]
    if shared_X is not None:
        Xtr, Xte = shared_X.rows(np.flatnonzero(train)), shared_X.rows(np.flatnonzero(test))
    else:
        Xtr, bases, stats = _prepare_design(panel.subset(rows=train), config.k)
        Xte = compute_scores(stats.apply(panel.subset(rows=test)), bases)
    grid = LambdaGrid(lambda_max(Xtr, ytr, weights), c_grid(config.n_lambda, config.c_min), config.alpha)
    path = path_search(Xtr, ytr, grid, weights, config.solver)
    return np.array([accuracy(Xte.margins(rec.B), yte) for rec in path.records])


def select_index(cv_mean: np.ndarray, atol: float = 1e-12) -> int:
    """Index of the best mean accuracy; ties go to the earliest (largest lambda)."""
    best = np.max(cv_mean)
    return int(np.flatnonzero(cv_mean >= best - atol)[0])


def cross_validate(panel: CurvePanel, labels, config: PipelineConfig | None = None,
                   weights=None, shared_X: ScoreMatrix | None = None):
    """Stratified K-fold accuracy along the relative penalty grid.

    FPC bases and standardization are recomputed on each training portion
    unless ``shared_X`` (scores computed on the full panel) is supplied.

    Returns
    -------
    dict with ``fold_accuracy`` (folds x n_lambda), ``mean``, ``sd``,
    ``selected_index`` and ``assignment``.
    """
    config = config or PipelineConfig()
    labels = np.asarray(labels, dtype=float)
    assignment = stratified_folds(panel, labels, config.folds, config.seed)
    p = panel.p if shared_X is None else shared_X.p
    weights = np.ones(p) if weights is None else np.asarray(weights, dtype=float)

    def run(fold):
        return _fold_accuracies(fold, panel, labels, assignment, config, shared_X, weights)

    if config.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=config.n_jobs) as pool:
            acc = np.stack(list(pool.map(run, range(config.folds))))
    else:
        acc = np.stack([run(f) for f in range(config.folds)])
    mean = acc.mean(axis=0)
    sd = acc.std(axis=0, ddof=1)
    return {
        "fold_accuracy": acc,
        "mean": mean,
        "sd": sd,
        "selected_index": select_index(mean),
        "assignment": assignment,
    }


@dataclass(frozen=True, eq=False)
class FittedModel:
    """Everything needed to score new curves.

    ``B`` has shape ``(p, k)`` and is zero outside ``active``; ``weights``
    holds the adaptive weights (``inf`` for features excluded from the refit).
    """

    grid: TimeGrid
    standardization: Standardization
    bases: list
    B: np.ndarray
    weights: np.ndarray
    active: np.ndarray
    lambda1: float
    lambda2: float
    metadata: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return self.B.shape[0]

    @property
    def k(self) -> int:
        return self.B.shape[1]


def adaptive_weights(norms: np.ndarray) -> np.ndarray:
    """``sd / norm`` weights for the surviving blocks (sample sd).

    Falls back to unit weights when the sd is undefined (one block) or zero.
    """
    norms = np.asarray(norms, dtype=float)
    if norms.size < 2:
        return np.ones_like(norms)
    sd = float(np.std(norms, ddof=1))
    if not sd > 0:
        return np.ones_like(norms)
    return sd / norms


def adaptive_refit(path: PathResult, X: ScoreMatrix, labels, config: PipelineConfig | None = None,
                   bases=None, standardization=None, grid: TimeGrid | None = None) -> FittedModel:
    """Reweight the selected solution's surviving blocks and refit once.

    Features outside the first-stage active set are dropped from the
    refit design, which is the same as giving them infinite weight.
    """
    config = config or PipelineConfig()
    labels = np.asarray(labels, dtype=float)
    rec = path.selected
    k = X.k
    first_stage = np.flatnonzero(np.linalg.norm(as_blocks(rec.B, k), axis=1) > 0)
    B_full = np.zeros((X.p, k))
    weights_full = np.full(X.p, np.inf)
    meta = {
        "first_stage_active": first_stage.tolist(),
        "selected_index": path.selected_index,
        "selected_c": rec.c,
    }
    if first_stage.size == 0:
        warnings.warn("selected model has no active features; returning the empty model",
                      RuntimeWarning, stacklevel=2)
        meta.update(refit_converged=True, refit_kkt=0.0)
        active = first_stage
    else:
        norms = np.linalg.norm(as_blocks(rec.B, k)[first_stage], axis=1)
        w = adaptive_weights(norms)
        X_sub = X.blocks(first_stage)
        # warm start at the selected point; the weighted lambda_max can be far
        # larger than the path's, so sigma follows the path schedule instead
        init = SolverState(V=rec.V, Z=None, B=as_blocks(rec.B, k)[first_stage].ravel(), sigma=0.0)
        s0, growth = sigma_schedule(rec.c, path.grid.lambda_max)
        solver_cfg = replace(config.solver,
                             sigma0=config.solver.sigma0 or s0,
                             sigma_growth=config.solver.sigma_growth or growth)
        rep = dal_fit(X_sub, labels, rec.lambda1, rec.lambda2, w, init=init, config=solver_cfg)
        B_full[first_stage] = as_blocks(rep.B, k)
        weights_full[first_stage] = w
        active = first_stage[rep.active_features]
        meta.update(refit_converged=rep.converged, refit_kkt=rep.kkt_residual,
                    refit_train_accuracy=accuracy(X.margins(B_full), labels))
    return FittedModel(
        grid=grid if grid is not None else (bases[0].grid if bases else None),
        standardization=standardization,
        bases=list(bases) if bases is not None else [],
        B=B_full,
        weights=weights_full,
        active=np.asarray(active, dtype=int),
        lambda1=rec.lambda1,
        lambda2=rec.lambda2,
        metadata=meta,
    )


def model_margins(model: FittedModel, panel: CurvePanel) -> np.ndarray:
    if not panel.grid.same_as(model.grid):
        raise DataError("panel grid does not match the model grid")
    if panel.p != model.p:
        raise DataError(f"panel has {panel.p} features, model expects {model.p}")
    act = model.active
    if act.size == 0:
        return np.zeros(panel.n)
    std = (panel.values[:, act, :] - model.standardization.mean[act]) / model.standardization.sd[act]
    efuns = np.stack([model.bases[j].eigenfunctions for j in act]) * model.grid.weights
    scores = np.einsum("ijt,jst->ijs", std, efuns)
    return np.einsum("ijs,js->i", scores, model.B[act])


def predict(model: FittedModel, panel: CurvePanel):
    """Probabilities of class +1 and hard labels (class +1 iff prob > 0.5)."""
    margins = model_margins(model, panel)
    prob = expit(margins)
    return prob, np.where(prob > 0.5, 1, -1)


def fit_pipeline(panel: CurvePanel, labels, config: PipelineConfig | None = None):
    """Standardize, project on FPCs, run the CV path and the adaptive refit.

    Returns
    -------
    model : FittedModel
    path : PathResult
        Full-data path with cross-validation scores attached.
    """
    config = config or PipelineConfig()
    labels = np.asarray(labels, dtype=float)
    if labels.shape != (panel.n,) or not np.all(np.abs(labels) == 1):
        raise DataError("labels must be an n-vector of -1/+1")
    X, bases, stats = _prepare_design(panel, config.k)
    weights = np.ones(panel.p)
    grid = build_lambda_grid(X, labels, weights, config.alpha, config.n_lambda, config.c_min)
    cv = cross_validate(panel, labels, config, weights,
                        shared_X=None if config.cv_recompute_fpc else X)
    path = path_search(X, labels, grid, weights, config.solver)
    path.cv_mean = cv["mean"]
    path.cv_sd = cv["sd"]
    path.cv_fold_accuracy = cv["fold_accuracy"]
    path.fold_assignment = cv["assignment"]
    path.selected_index = cv["selected_index"]
    model = adaptive_refit(path, X, labels, config, bases=bases, standardization=stats,
                           grid=panel.grid)
    model.metadata.update(
        config=_config_snapshot(config),
        lambda_max=grid.lambda_max,
        n_train=panel.n,
        min_variance_explained=float(min(b.variance_explained for b in bases)),
        cv_recompute_fpc=config.cv_recompute_fpc,
    )
    return model, path


def _config_snapshot(config: PipelineConfig) -> dict:
    snap = config.as_dict()
    snap["solver"] = {k: v for k, v in snap["solver"].items()}
    return snap
