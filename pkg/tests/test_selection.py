import numpy as np
import pytest
from scipy.special import expit

from fsfc.exceptions import ConfigError, DataError
from fsfc.funcdata import CurvePanel, ScoreMatrix, Standardization, TimeGrid
from fsfc.selection import (
    FittedModel,
    LambdaGrid,
    PipelineConfig,
    accuracy,
    adaptive_refit,
    adaptive_weights,
    build_lambda_grid,
    c_grid,
    cross_validate,
    fit_pipeline,
    lambda_max,
    model_margins,
    path_search,
    predict,
    select_index,
    stratified_folds,
)
from fsfc.selection import _prepare_design
from fsfc.simlab import ScenarioSpec, generate_scenario
from fsfc.solver import dal_fit

import oracles

FAST = PipelineConfig(n_lambda=30)


def scenario(seed=0, n=120, p=12, p0=2, m=30):
    return generate_scenario(ScenarioSpec(n, p, p0, grid_size=m, seed=seed))


def design(seed=0, n=60, p=8, k=3):
    rng = np.random.default_rng(seed)
    X, y = oracles.random_problem(rng, n, p, k, active=3)
    return ScoreMatrix(X, p, k), y


class TestLambdaMax:
    def test_hand_value(self):
        X = ScoreMatrix(np.array([[3.0, 4.0], [0.0, 0.0]]), 1, 2)
        y = np.array([1.0, 1.0])
        assert lambda_max(X, y) == pytest.approx(2.5)
        rep = dal_fit(X, y, 2.5, 2.0)
        assert rep.active_features.size == 0

    def test_homogeneity_and_sign(self):
        X, y = design(1)
        lm = lambda_max(X, y)
        assert lambda_max(X, y, 2 * np.ones(X.p)) == pytest.approx(lm / 2)
        assert lambda_max(X, -y) == lm

    def test_degenerate(self):
        X = ScoreMatrix(np.zeros((4, 2)), 1, 2)
        assert lambda_max(X, np.array([1.0, -1, 1, -1])) == 0.0
        with pytest.raises(DataError):
            build_lambda_grid(X, np.array([1.0, -1, 1, -1]))

    def test_just_below_lambda_max_is_active(self):
        X, y = design(2)
        lm = lambda_max(X, y)
        rep = dal_fit(X, y, 0.98 * lm, 0.98 * 0.8 * lm)
        assert rep.active_features.size >= 1


class TestGrid:
    def test_shape(self):
        X, y = design(0)
        grid = build_lambda_grid(X, y)
        assert len(grid) == 100
        assert grid.c_values[0] == 1.0 and grid.lambda1[0] == grid.lambda_max
        assert grid.c_values[-1] == pytest.approx(0.01, rel=1e-14)
        np.testing.assert_allclose(grid.c_values[1:] / grid.c_values[:-1], 0.01 ** (1 / 99), rtol=1e-12)
        np.testing.assert_allclose(grid.lambda2, 0.8 * grid.lambda1)


class TestPath:
    def test_first_point_empty_and_warm_equals_cold(self):
        X, y = design(3)
        grid = LambdaGrid(lambda_max(X, y), c_grid(15), 0.2)
        path = path_search(X, y, grid)
        assert path.records[0].active.size == 0
        assert np.all(np.diff(path.active_counts[:8]) >= 0)
        for i in (3, 5, 10):
            rec = path.records[i]
            cold = dal_fit(X, y, rec.lambda1, rec.lambda2, lambda_max_value=grid.lambda_max)
            warm = path_search(X, y, LambdaGrid(grid.lambda_max, grid.c_values[:i + 1], 0.2), keep_reports=True)
            assert cold.converged and warm.records[-1].converged
            assert warm.records[-1].report.objective == pytest.approx(cold.objective, rel=1e-6)

    def test_every_record_converged_or_flagged(self):
        X, y = design(4)
        path = path_search(X, y, LambdaGrid(lambda_max(X, y), c_grid(20), 0.2))
        for rec in path.records:
            assert rec.kkt_residual < 1e-4 or not rec.converged

    def test_weight_scaling_leaves_active_path(self):
        X, y = design(5)
        c = c_grid(12)
        a = path_search(X, y, LambdaGrid(lambda_max(X, y), c, 0.2))
        w = 3.0 * np.ones(X.p)
        b = path_search(X, y, LambdaGrid(lambda_max(X, y, w), c, 0.2), weights=w)
        for ra, rb in zip(a.records, b.records):
            np.testing.assert_array_equal(ra.active, rb.active)

    def test_true_features_enter(self):
        data = scenario(1)
        X, _, _ = _prepare_design(data.train, 5)
        path = path_search(X, data.train_labels, build_lambda_grid(X, data.train_labels, n_points=40))
        seen = set().union(*(set(r.active.tolist()) for r in path.records))
        assert set(data.support.tolist()) <= seen


class TestCrossValidation:
    def test_separable_toy(self):
        rng = np.random.default_rng(0)
        grid = TimeGrid.uniform(10)
        n = 40
        y = np.repeat([1.0, -1.0], n // 2)
        shape = np.sin(np.pi * grid.points)
        vals = (y[:, None] * (1.5 + rng.random(n))[:, None] * shape + 0.05 * rng.standard_normal((n, 10)))
        cv = cross_validate(CurvePanel(vals[:, None, :], grid), y, PipelineConfig(k=2, n_lambda=20))
        assert cv["mean"].max() == 1.0

    def test_permutation_invariant(self):
        data = scenario(2, n=60, p=6)
        perm = np.random.default_rng(9).permutation(60)
        cfg = PipelineConfig(n_lambda=15, seed=4)
        a = cross_validate(data.train, data.train_labels, cfg)
        b = cross_validate(data.train.subset(rows=perm), data.train_labels[perm], cfg)
        assert a["selected_index"] == b["selected_index"]
        np.testing.assert_array_equal(a["assignment"][perm], b["assignment"])
        np.testing.assert_allclose(a["mean"], b["mean"])

    def test_folds_stratified(self):
        data = scenario(3, n=60, p=3)
        folds = stratified_folds(data.train, data.train_labels, 5, 0)
        for f in range(5):
            counts = [np.sum((folds == f) & (data.train_labels == c)) for c in (-1, 1)]
            for c, cnt in zip((-1, 1), counts):
                total = np.sum(data.train_labels == c)
                assert total // 5 <= cnt <= -(-total // 5)

    def test_errors(self):
        data = scenario(4, n=30, p=2)
        with pytest.raises(DataError):
            cross_validate(data.train, np.ones(30), FAST)
        with pytest.raises(ConfigError):
            cross_validate(data.train, data.train_labels, PipelineConfig(folds=31))
        y = -np.ones(30)
        y[:3] = 1
        with pytest.raises(ConfigError):
            stratified_folds(data.train, y, 5, 0)

    def test_selection_rule(self):
        assert select_index(np.array([0.5, 0.8, 0.8, 0.7])) == 1
        assert select_index(np.array([0.9, 0.8])) == 0
        data = scenario(5, n=50, p=4)
        cv = cross_validate(data.train, data.train_labels, PipelineConfig(n_lambda=10))
        assert select_index(cv["fold_accuracy"].mean(axis=0)) == cv["selected_index"]

    def test_shared_basis_mode(self):
        data = scenario(6, n=50, p=4)
        X, _, _ = _prepare_design(data.train, 5)
        cv = cross_validate(data.train, data.train_labels, PipelineConfig(n_lambda=10), shared_X=X)
        assert cv["fold_accuracy"].shape == (5, 10)


class TestAdaptive:
    def test_weights(self):
        np.testing.assert_allclose(adaptive_weights(np.array([1.0, 3.0])), [np.sqrt(2), np.sqrt(2) / 3])
        np.testing.assert_array_equal(adaptive_weights(np.array([2.0, 2.0, 2.0])), 1.0)
        np.testing.assert_array_equal(adaptive_weights(np.array([0.7])), 1.0)

    def test_refit_subset_of_first_stage(self):
        model, path = fit_pipeline(scenario(7).train, scenario(7).train_labels, FAST)
        first = set(model.metadata["first_stage_active"])
        assert set(model.active.tolist()) <= first
        assert set(np.flatnonzero(np.isfinite(model.weights)).tolist()) == first
        inactive = np.setdiff1d(np.arange(model.p), model.active)
        assert not np.any(model.B[inactive])
        assert model.metadata["refit_converged"]

    def test_empty_selection_warns(self):
        X, y = design(0)
        grid = LambdaGrid(lambda_max(X, y), c_grid(3), 0.2)
        path = path_search(X, y, grid)
        path.selected_index = 0
        with pytest.warns(RuntimeWarning):
            model = adaptive_refit(path, X, y)
        assert model.active.size == 0


class TestPredict:
    @classmethod
    def setup_class(cls):
        cls.data = scenario(8, n=90, p=6)
        cls.model, cls.path = fit_pipeline(cls.data.train, cls.data.train_labels, FAST)

    def test_zero_model(self):
        m = self.model
        zero = FittedModel(m.grid, m.standardization, m.bases, np.zeros_like(m.B), m.weights,
                           np.array([], dtype=int), m.lambda1, m.lambda2)
        prob, cls = predict(zero, self.data.test)
        np.testing.assert_array_equal(prob, 0.5)
        np.testing.assert_array_equal(cls, -1)

    def test_probability_orientation(self):
        f = model_margins(self.model, self.data.test)
        prob, cls = predict(self.model, self.data.test)
        np.testing.assert_allclose(prob, 1 - expit(-f), atol=1e-15)
        np.testing.assert_array_equal(cls, np.where(f > 0, 1, -1))
        assert accuracy(f, self.data.test_labels) > 0.6

    def test_grid_mismatch(self):
        other = generate_scenario(ScenarioSpec(10, 6, 1, grid_size=31, seed=0)).train
        with pytest.raises(DataError):
            predict(self.model, other)

    def test_feature_permutation(self):
        perm = np.random.default_rng(3).permutation(6)
        inv = np.argsort(perm)
        m = self.model
        stats = Standardization(m.standardization.mean[perm], m.standardization.sd[perm],
                                m.standardization.degenerate[perm])
        permuted = FittedModel(m.grid, stats, [m.bases[j] for j in perm], m.B[perm], m.weights[perm],
                               np.sort(inv[m.active]), m.lambda1, m.lambda2)
        a = predict(m, self.data.test)[0]
        b = predict(permuted, self.data.test.subset(features=perm))[0]
        np.testing.assert_allclose(a, b, rtol=1e-13)

    def test_deterministic(self):
        again, path2 = fit_pipeline(self.data.train, self.data.train_labels, FAST)
        assert path2.selected_index == self.path.selected_index
        np.testing.assert_array_equal(again.active, self.model.active)
        np.testing.assert_array_equal(again.B, self.model.B)


def test_labels_validated():
    data = scenario(0, n=30, p=2)
    with pytest.raises(DataError):
        fit_pipeline(data.train, np.zeros(30), FAST)


def test_support_recovery_rate():
    hits = 0
    for seed in range(10):
        data = generate_scenario(ScenarioSpec(300, 30, 2, grid_size=50, seed=100 + seed))
        model, _ = fit_pipeline(data.train, data.train_labels, PipelineConfig(n_lambda=40, seed=seed))
        hits += set(data.support.tolist()) <= set(model.active.tolist())
    assert hits >= 9
