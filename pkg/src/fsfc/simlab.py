"""Synthetic benchmark: Matérn-process features, logistic labels, metrics."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gamma, kv

from .exceptions import ConfigError, DataError
from .funcdata import CurvePanel, TimeGrid
from .selection import PipelineConfig, accuracy, fit_pipeline, model_margins

logger = logging.getLogger(__name__)

METRICS = ("precision", "recall", "train_accuracy", "test_accuracy")


@dataclass(frozen=True)
class MaternParams:
    eta2: float = 1.0
    ell: float = 0.25
    nu: float = 3.5

    def __post_init__(self):
        if not (self.eta2 > 0 and self.ell > 0 and self.nu > 0):
            raise ConfigError("Matérn parameters must all be positive")


def _half_integer_order(nu: float):
    p = nu - 0.5
    if p >= 0 and abs(p - round(p)) < 1e-12:
        return int(round(p))
    return None


def matern_cov(t, s, params: MaternParams = MaternParams()):
    """Matérn covariance between time points ``t`` and ``s`` (broadcasting).

    Half-integer smoothness uses the exact exponential-polynomial form;
    other values go through the modified Bessel function.
    """
    d = np.abs(np.asarray(t, dtype=float) - np.asarray(s, dtype=float))
    x = math.sqrt(2 * params.nu) * d / params.ell
    order = _half_integer_order(params.nu)
    if order is not None:
        poly = np.zeros_like(x)
        for i in range(order + 1):
            coef = (
                math.factorial(order) * math.factorial(order + i)
                / (math.factorial(2 * order) * math.factorial(i) * math.factorial(order - i))
            )
            poly = poly + coef * (2 * x) ** (order - i)
        return params.eta2 * np.exp(-x) * poly
    with np.errstate(invalid="ignore"):
        val = params.eta2 / (gamma(params.nu) * 2 ** (params.nu - 1)) * x ** params.nu * kv(params.nu, x)
    return np.where(x == 0, params.eta2, val)


def matern_gram(grid: TimeGrid, params: MaternParams = MaternParams()) -> np.ndarray:
    return matern_cov(grid.points[:, None], grid.points[None, :], params)


def gp_factor(grid: TimeGrid, params: MaternParams = MaternParams()) -> np.ndarray:
    """Lower Cholesky factor of the Gram matrix with escalating jitter."""
    C = matern_gram(grid, params)
    jitter = 1e-10 * params.eta2
    while jitter <= 1e-4 * params.eta2 * (1 + 1e-9):
        try:
            return np.linalg.cholesky(C + jitter * np.eye(grid.m))
        except np.linalg.LinAlgError:
            jitter *= 10
    raise DataError("Matérn Gram matrix could not be factorized even with jitter 1e-4")


def sample_gp(grid: TimeGrid, params: MaternParams, count: int, seed=None, factor=None) -> np.ndarray:
    """``count`` zero-mean Matérn curves on ``grid``, shape ``(count, m)``.

    ``seed`` may be an integer or a ``numpy.random.Generator``.
    """
    rng = np.random.default_rng(seed)
    L = gp_factor(grid, params) if factor is None else factor
    return rng.standard_normal((count, grid.m)) @ L.T


@dataclass(frozen=True)
class ScenarioSpec:
    n: int
    p: int
    p0: int
    grid_size: int = 100
    n_test: int | None = None
    seed: int = 0
    margin: str = "grid"

    def __post_init__(self):
        if self.n < 2 or self.p < 1:
            raise ConfigError("a scenario needs n >= 2 and p >= 1")
        if not 0 <= self.p0 <= self.p:
            raise ConfigError(f"p0 must lie in [0, p], got p0={self.p0}, p={self.p}")
        if self.test_size < 1:
            raise ConfigError("n_test must be at least 1")
        if self.margin not in ("grid", "quadrature"):
            raise ConfigError(f"margin must be 'grid' or 'quadrature', got {self.margin!r}")

    @property
    def test_size(self) -> int:
        return self.n_test if self.n_test is not None else self.n // 3


@dataclass(frozen=True, eq=False)
class ScenarioData:
    """Raw (unstandardized) curves, labels and the generating coefficients."""

    train: CurvePanel
    train_labels: np.ndarray
    test: CurvePanel
    test_labels: np.ndarray
    coefficients: np.ndarray
    support: np.ndarray
    train_margins: np.ndarray = field(repr=False, default=None)
    test_margins: np.ndarray = field(repr=False, default=None)


def true_margins(values: np.ndarray, coefficients: np.ndarray, support, grid: TimeGrid,
                 mode: str = "grid") -> np.ndarray:
    """Functional linear predictor of each instance.

    ``"quadrature"`` integrates ``sum_j B_j(t) X_ij(t)`` with trapezoid
    weights; ``"grid"`` takes the plain dot product over grid points.
    """
    if len(support) == 0:
        return np.zeros(values.shape[0])
    coefs = coefficients[support]
    if mode == "quadrature":
        coefs = coefs * grid.weights
    return np.einsum("ijt,jt->i", values[:, support, :], coefs)


def _draw_labels(margins, rng, max_tries=10):
    prob = expit(margins)
    for _ in range(max_tries):
        labels = np.where(rng.random(margins.size) < prob, 1.0, -1.0)
        if np.unique(labels).size == 2 or labels.size < 2:
            return labels
    raise DataError(f"labels were single-class in {max_tries} consecutive draws")


def generate_scenario(spec: ScenarioSpec, matern: MaternParams = MaternParams()) -> ScenarioData:
    """Draw one synthetic scenario; a pure function of ``(spec, matern)``."""
    rng = np.random.default_rng(spec.seed)
    grid = TimeGrid.uniform(spec.grid_size)
    L = gp_factor(grid, matern)
    support = np.sort(rng.choice(spec.p, size=spec.p0, replace=False)) if spec.p0 else np.array([], int)
    coefficients = np.zeros((spec.p, grid.m))
    if spec.p0:
        coefficients[support] = sample_gp(grid, matern, spec.p0, rng, factor=L)

    def draw_panel(n):
        vals = np.empty((n, spec.p, grid.m))
        for j in range(spec.p):
            vals[:, j, :] = sample_gp(grid, matern, n, rng, factor=L)
        return vals

    train_vals = draw_panel(spec.n)
    test_vals = draw_panel(spec.test_size)
    train_margins = true_margins(train_vals, coefficients, support, grid, spec.margin)
    test_margins = true_margins(test_vals, coefficients, support, grid, spec.margin)
    train_labels = _draw_labels(train_margins, rng)
    test_labels = _draw_labels(test_margins, rng)
    return ScenarioData(
        train=CurvePanel(train_vals, grid),
        train_labels=train_labels,
        test=CurvePanel(test_vals, grid),
        test_labels=test_labels,
        coefficients=coefficients,
        support=support,
        train_margins=train_margins,
        test_margins=test_margins,
    )


def selection_metrics(selected, truth):
    """Precision and recall of a selected feature set against the truth.

    An empty selection has precision 0 (1 if the truth is empty too); an
    empty truth has recall 1.
    """
    selected = set(int(j) for j in selected)
    truth = set(int(j) for j in truth)
    hits = len(selected & truth)
    recall = hits / len(truth) if truth else 1.0
    if selected:
        precision = hits / len(selected)
    else:
        precision = 0.0 if truth else 1.0
    return precision, recall


@dataclass(frozen=True)
class ReplicationRow:
    rep: int
    seed: int
    ok: bool
    precision: float = float("nan")
    recall: float = float("nan")
    train_accuracy: float = float("nan")
    test_accuracy: float = float("nan")
    n_selected: int = 0
    seconds: float = float("nan")
    cpu_seconds: float = float("nan")
    error: str = ""


def replication_seeds(seed: int, reps: int) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(reps)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def run_one(spec: ScenarioSpec, rep: int, seed: int, config: PipelineConfig,
            matern: MaternParams = MaternParams()) -> ReplicationRow:
    wall0, cpu0 = time.perf_counter(), time.process_time()
    try:
        data = generate_scenario(ScenarioSpec(
            spec.n, spec.p, spec.p0, spec.grid_size, spec.n_test, seed, spec.margin), matern)
        cfg = PipelineConfig(**{**config.as_dict(), "solver": config.solver, "seed": seed})
        model, _ = fit_pipeline(data.train, data.train_labels, cfg)
        precision, recall = selection_metrics(model.active, data.support)
        train_acc = accuracy(model_margins(model, data.train), data.train_labels)
        test_acc = accuracy(model_margins(model, data.test), data.test_labels)
    except Exception as exc:  # recorded and excluded from the summary
        logger.warning("replication %d failed: %s", rep, exc)
        return ReplicationRow(rep, seed, False, error=f"{type(exc).__name__}: {exc}",
                              seconds=time.perf_counter() - wall0,
                              cpu_seconds=time.process_time() - cpu0)
    return ReplicationRow(
        rep, seed, True, precision, recall, train_acc, test_acc, int(model.active.size),
        seconds=time.perf_counter() - wall0, cpu_seconds=time.process_time() - cpu0,
    )


def summarize(rows, columns=METRICS + ("seconds",)) -> dict:
    """Means and quartiles of each metric over successful replications."""
    ok = [r for r in rows if r.ok]
    out = {"reps": len(rows), "failed": len(rows) - len(ok)}
    for col in columns:
        vals = np.array([getattr(r, col) for r in ok], dtype=float)
        if vals.size:
            q25, q50, q75 = np.quantile(vals, [0.25, 0.5, 0.75])
            out[col] = {"mean": float(vals.mean()), "q25": float(q25),
                        "median": float(q50), "q75": float(q75)}
        else:
            out[col] = {"mean": float("nan"), "q25": float("nan"),
                        "median": float("nan"), "q75": float("nan")}
    return out


def run_replications(spec: ScenarioSpec, reps: int, config: PipelineConfig | None = None,
                     matern: MaternParams = MaternParams(), n_jobs: int = 1):
    """Run the full pipeline on ``reps`` independent scenario draws.

    Replication ``i`` uses the ``i``-th child of ``SeedSequence(spec.seed)``.

    Returns
    -------
    rows : list of ReplicationRow
    summary : dict
    """
    if reps < 1:
        raise ConfigError("reps must be at least 1")
    config = config or PipelineConfig()
    seeds = replication_seeds(spec.seed, reps)

    def job(i):
        return run_one(spec, i, seeds[i], config, matern)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            rows = list(pool.map(job, range(reps)))
    else:
        rows = [job(i) for i in range(reps)]
    return rows, summarize(rows)
