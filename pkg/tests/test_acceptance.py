"""Acceptance criteria, each run at its stated tolerance and time budget."""

import filecmp
import gc
import time

import numpy as np
import pytest

from fsfc.cli import run_command
from fsfc.dualops import PenaltyParams, h_conjugate, h_conjugate_derivatives, prox_group, psi_eval
from fsfc.funcdata import ScoreMatrix, compute_fpc_all, standardize_panel
from fsfc.selection import PipelineConfig, _prepare_design, lambda_max
from fsfc.simlab import ScenarioSpec, generate_scenario, run_replications
from fsfc.solver import SolverConfig, dal_fit, newton_direction, sigma_schedule, z_update

import oracles


def random_psi_point(rng, n, p, k, sigma=None):
    """A random dual point whose threshold splits the blocks into active and inactive."""
    X = ScoreMatrix(rng.standard_normal((n, p * k)), p, k)
    y = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    V = -y * rng.uniform(0.05, 0.95, n)
    B = rng.standard_normal(p * k)
    weights = rng.uniform(0.5, 2.0, p)
    sigma = rng.uniform(0.1, 2.0) if sigma is None else sigma
    T = np.linalg.norm((B - sigma * (X.T @ V)).reshape(p, k), axis=1) / weights
    r = rng.integers(1, p + 1)  # number of active blocks
    srt = np.sort(T)[::-1]
    cut = 0.5 * (srt[r - 1] + srt[r]) if r < p else 0.5 * srt[-1]
    lam = cut / sigma
    return X, y, V, B, PenaltyParams(lam, rng.uniform(0.1, 1.0) * lam, weights, sigma)


def test_1_conjugate_oracle(verdict):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    y = np.where(rng.random(200) < 0.5, 1.0, -1.0)
    V = -y * rng.uniform(0.01, 0.99, 200)
    ours = np.array([h_conjugate(V[i:i + 1], y[i:i + 1]) for i in range(200)])
    ref = oracles.conjugate_by_grid(V, y)
    err = np.max(np.abs(ours - ref))
    elapsed = time.perf_counter() - t0
    verdict(1, "conjugate vs grid supremum", err < 1e-4 and elapsed < 10,
            f"max error {err:.2e}, {elapsed:.1f} s")


def test_2_prox_oracle(verdict):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        x = rng.standard_normal(5) * rng.uniform(0.1, 3.0)
        sigma, omega, l1 = rng.uniform(0.1, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.1, 2.0)
        l2 = rng.uniform(0.0, 2.0)
        ours = prox_group(x, sigma, omega, l1, l2)
        ref = oracles.prox_by_minimization(x, sigma, omega, l1, l2)
        worst = max(worst, np.linalg.norm(ours - ref))
    elapsed = time.perf_counter() - t0
    verdict(2, "prox vs numeric minimization", worst < 1e-6 and elapsed < 10,
            f"max blockwise error {worst:.2e}, {elapsed:.1f} s")


def test_3_derivative_checks(verdict):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    val_err = grad_err = hv_err = 0.0
    for _ in range(20):
        n, p, k = rng.integers(5, 31), rng.integers(2, 11), rng.integers(1, 5)
        X, y, V, B, params = random_psi_point(rng, n, p, k)
        psi, grad, active = psi_eval(V, y, B, X, params)
        Z = z_update(V, B, params.sigma, X, params)
        direct = oracles.augmented_lagrangian(V, Z, B, X.data, y, params.weights, params.lambda1,
                                              params.lambda2, params.sigma, k)
        val_err = max(val_err, abs(psi - direct))

        eps = 1e-6
        fd = np.empty(n)
        for i in range(n):
            e = np.zeros(n)
            e[i] = eps
            fd[i] = (psi_eval(V + e, y, B, X, params)[0] - psi_eval(V - e, y, B, X, params)[0]) / (2 * eps)
        grad_err = max(grad_err, np.linalg.norm(fd - grad) / np.linalg.norm(grad))

        _, hess = h_conjugate_derivatives(V, y)
        D = newton_direction(active, grad, hess, X, params)
        d = D / np.linalg.norm(D)
        g_plus = psi_eval(V + eps * d, y, B, X, params)[1]
        g_minus = psi_eval(V - eps * d, y, B, X, params)[1]
        hv_fd = (g_plus - g_minus) / (2 * eps) * np.linalg.norm(D)
        # the Newton system says H D = -grad
        hv_err = max(hv_err, np.linalg.norm(hv_fd + grad) / np.linalg.norm(grad))
    elapsed = time.perf_counter() - t0
    ok = val_err < 1e-10 and grad_err < 1e-5 and hv_err < 1e-4 and elapsed < 30
    verdict(3, "psi value, gradient and Hessian", ok,
            f"value {val_err:.1e}, gradient {grad_err:.1e}, Hessian-vector {hv_err:.1e}, {elapsed:.1f} s")


def test_4_smw_equivalence(verdict):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    worst = 0.0
    low_rank = 0
    for _ in range(50):
        n, p, k = rng.integers(10, 61), rng.integers(2, 16), rng.integers(1, 6)
        X, y, V, B, params = random_psi_point(rng, n, p, k)
        _, grad, active = psi_eval(V, y, B, X, params)
        _, hess = h_conjugate_derivatives(V, y)
        low_rank += active.r * k < n
        d_smw = newton_direction(active, grad, hess, X, params, route="smw")
        d_dir = newton_direction(active, grad, hess, X, params, route="direct")
        worst = max(worst, np.linalg.norm(d_smw - d_dir) / np.linalg.norm(d_dir))
    elapsed = time.perf_counter() - t0
    verdict(4, "Woodbury vs direct Newton solve", worst < 1e-8 and elapsed < 10 and 0 < low_rank < 50,
            f"max relative error {worst:.1e}, {low_rank}/50 with rk < n, {elapsed:.1f} s")


def test_5_solver_vs_proximal_gradient(verdict):
    t0 = time.perf_counter()
    obj_err = coef_err = 0.0
    kkt_bad = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        Xd, y = oracles.random_problem(rng, 60, 8, 3, active=3)
        X = ScoreMatrix(Xd, 8, 3)
        l1 = 0.1 * lambda_max(X, y)
        rep = dal_fit(X, y, l1, 0.8 * l1)
        w = np.ones(8)
        ref = oracles.proximal_gradient(Xd, y, w, l1, 0.8 * l1, 3)
        ref_obj = oracles.primal_objective(ref, Xd, y, w, l1, 0.8 * l1, 3)
        obj = oracles.primal_objective(rep.B, Xd, y, w, l1, 0.8 * l1, 3)
        obj_err = max(obj_err, abs(obj - ref_obj) / abs(ref_obj))
        coef_err = max(coef_err, np.linalg.norm((rep.B - ref).reshape(8, 3), axis=1).max())
        if rep.converged and not rep.kkt_residual < 1e-4:
            kkt_bad.append(seed)
    elapsed = time.perf_counter() - t0
    ok = obj_err < 1e-6 and coef_err < 1e-4 and not kkt_bad and elapsed < 120
    verdict(5, "solver vs proximal-gradient reference", ok,
            f"objective rel. error {obj_err:.1e}, blockwise coefficient error {coef_err:.2e}, "
            f"KKT violations {kkt_bad}, {elapsed:.1f} s")


def test_6_lambda_max_gives_zero(verdict):
    t0 = time.perf_counter()
    nonzero = []
    for seed in range(20):
        rng = np.random.default_rng(600 + seed)
        n, p, k = rng.integers(20, 80), rng.integers(2, 20), rng.integers(1, 6)
        Xd, y = oracles.random_problem(rng, n, p, k, active=2)
        X = ScoreMatrix(Xd, p, k)
        w = rng.uniform(0.5, 2.0, p)
        lm = lambda_max(X, y, w)
        rep = dal_fit(X, y, lm, 0.8 * lm, w)
        if np.any(rep.B != 0):
            nonzero.append(seed)
    elapsed = time.perf_counter() - t0
    verdict(6, "lambda_max yields the zero model", not nonzero and elapsed < 30,
            f"nonzero fits {nonzero}, {elapsed:.1f} s")


@pytest.mark.parametrize("p0", [2, 5])
def test_7_simulation_reproduction(verdict, p0):
    rows, summary = run_replications(ScenarioSpec(300, 800, p0, seed=700 + p0), 10, PipelineConfig())
    recall = summary["recall"]["mean"]
    acc = summary["test_accuracy"]["mean"]
    secs = summary["seconds"]["mean"]
    ok = summary["failed"] == 0 and recall >= 0.75 and acc >= 0.80 and secs <= 60
    verdict(7, f"simulation n=300 p=800 p0={p0}", ok,
            f"mean recall {recall:.3f}, mean test accuracy {acc:.3f}, "
            f"mean {secs:.1f} s per replication, {summary['failed']} failed")


def test_8_newton_cost_independent_of_p(verdict):
    c = 0.3
    per_iter = {}
    for p in (400, 2000):
        times = []
        for seed in range(5):
            data = generate_scenario(ScenarioSpec(300, p, 2, n_test=1, seed=800 + seed))
            X, _, _ = _prepare_design(data.train, 5)
            y = data.train_labels
            del data
            gc.collect()
            lm = lambda_max(X, y)
            s0, growth = sigma_schedule(c, lm)
            rep = dal_fit(X, y, c * lm, 0.8 * c * lm, config=SolverConfig(sigma0=s0, sigma_growth=growth))
            times.append(rep.newton_time / rep.outer_iter)
            del X
        per_iter[p] = float(np.median(times))
    ratio = per_iter[2000] / per_iter[400]
    verdict(8, "Newton time per outer iteration, p=2000 vs p=400", ratio <= 3.0,
            f"median {per_iter[400] * 1e3:.3f} ms vs {per_iter[2000] * 1e3:.3f} ms, ratio {ratio:.2f}")


def test_9_bench_determinism(verdict, tmp_path):
    args = ["bench", "--n", "90", "--p", "20", "--p0", "2", "--reps", "2", "--grid-size", "40", "--seed", "9"]
    codes = [run_command(args + ["--out", str(tmp_path / run)]) for run in ("a", "b")]
    same = [filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)
            for f in ("replications.csv", "summary.csv")]
    verdict(9, "bench determinism", codes == [0, 0] and all(same),
            f"exit codes {codes}, replications identical {same[0]}, summary identical {same[1]}")


def test_10_fpc_adequacy(verdict):
    worst = 1.0
    for seed in range(10):
        data = generate_scenario(ScenarioSpec(300, 20, 0, seed=1000 + seed))
        std, _ = standardize_panel(data.train)
        worst = min(worst, min(b.variance_explained for b in compute_fpc_all(std, 5)))
    verdict(10, "k=5 FPC variance explained", worst >= 0.95, f"minimum {worst:.4f}")
