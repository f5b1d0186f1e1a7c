"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The two trend criteria run the full optimal-control experiments and take
several minutes.
"""

import csv
import time
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import dense_ekf_calibration, dense_kalman_smoother, iwp_quadrature
from pnocp import (
    ControlledIVP,
    Grids,
    InputPolicy,
    IWPModel,
    OCPSpec,
    expected_cost,
    gradient,
    ode_filter_smoother,
    taylor_init,
    transition_matrices,
)
from pnocp.cli import DEFAULT_SWEEP, ExperimentConfig, convergence_rows, run_openloop, run_sweep
from pnocp.ocp import finite_difference_gradient
from pnocp.problem import linear_example, logistic_example, scalar_logistic, zero_example


@contextmanager
def criterion(number, title, budget=None):
    """Record ``PASS``/``FAIL`` for one criterion, including its runtime."""
    start = time.perf_counter()
    state = {"detail": ""}
    try:
        yield state
    except BaseException:
        elapsed = time.perf_counter() - start
        line = f"[FAIL] {number}. {title} ({elapsed:.1f} s) {state['detail']}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        raise
    elapsed = time.perf_counter() - start
    if budget is not None and elapsed > budget:
        line = f"[FAIL] {number}. {title} ({elapsed:.1f} s > {budget} s budget) {state['detail']}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        pytest.fail(line)
    line = f"[PASS] {number}. {title} ({elapsed:.1f} s) {state['detail']}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def test_1_iwp_transitions():
    with criterion(1, "IWP transitions match the matrix-exponential oracle", budget=5) as c:
        rng = np.random.default_rng(2024)
        worst = 0.0
        for p in (1, 2, 3):
            model = IWPModel(p, 1)
            for dt in rng.uniform(1e-3, 1.0, size=20):
                tp = transition_matrices(model, dt)
                A, Q = iwp_quadrature(p, 1, dt)
                worst = max(worst, np.max(np.abs(tp.A - A)), np.max(np.abs(tp.Qn - Q)))
            for h1, h2 in rng.uniform(0.0, 1.0, size=(20, 2)):
                t1, t2, t12 = (transition_matrices(model, h) for h in (h1, h2, h1 + h2))
                np.testing.assert_allclose(t12.A, t2.A @ t1.A, rtol=0, atol=1e-12)
                np.testing.assert_allclose(t12.Qn, t2.A @ t1.Qn @ t2.A.T + t2.Qn, rtol=0, atol=1e-12)
        c["detail"] = f"max entry error {worst:.1e}"
        assert worst <= 1e-10


def _affine_problem():
    ivp, _ = linear_example(a=-1.0, x0=1.0, T=3.0)
    grids = Grids.uniform(3.0, 7, 49)  # 50 nodes
    pol = InputPolicy(grids.control, np.sin(grids.control))
    return ivp, grids, pol


def test_2_affine_exactness():
    with criterion(2, "affine problems match the dense Kalman smoother", budget=5) as c:
        ivp, grids, pol = _affine_problem()
        t = grids.integration
        worst_mean = worst_cov = 0.0
        for p in (1, 2):
            model = IWPModel(p, 1)
            tps = [transition_matrices(model, h) for h in np.diff(t)]
            n = model.n
            obs = []
            for ti in t[1:]:
                C = np.zeros((1, n))
                C[0, 1], C[0, 0] = 1.0, 1.0  # x' - (-x) = u
                obs.append((C, pol(ti)))
            m0 = taylor_init(ivp, pol, model)
            _, _, xs, Ls, _ = dense_kalman_smoother([s.A for s in tps], [s.Qn for s in tps], m0, np.zeros((n, n)), obs)
            for mode in ("eks", "ieks"):
                post = ode_filter_smoother(ivp, pol, grids, model, mode=mode)
                worst_mean = max(worst_mean, np.max(np.abs(post.means - xs)))
                scale = np.max(np.abs(Ls), axis=(1, 2))
                rel = np.max(np.abs(post.cov - Ls), axis=(1, 2)) / np.where(scale > 0, scale, 1.0)
                worst_cov = max(worst_cov, rel.max())
        c["detail"] = f"mean error {worst_mean:.1e}, covariance relative error {worst_cov:.1e}"
        assert worst_mean <= 1e-10 and worst_cov <= 1e-8


def test_3_convergence_order():
    with criterion(3, "empirical convergence order >= p - 0.5 on the logistic equation", budget=30) as c:
        ivp, d = scalar_logistic()
        steps = (40, 80, 160, 320, 640)
        rows = convergence_rows(ivp, d.extra["solution"], (1, 2), steps)
        orders = {}
        for p in (1, 2):
            err = np.array([r[2] for r in rows if r[0] == p])
            slope = np.polyfit(np.log(5.0 / np.array(steps)), np.log(err), 1)[0]
            orders[p] = slope
        c["detail"] = ", ".join(f"p={p}: {o:.2f}" for p, o in orders.items())
        assert all(orders[p] >= p - 0.5 for p in orders)


def _random_nonlinear(seed):
    rng = np.random.default_rng(seed)
    W = 0.5 * rng.standard_normal((2, 2))
    c = 0.3 * rng.standard_normal(2)
    f = lambda t, x, u: np.tanh(W @ x) + c * np.sin(t) + np.array([u[0], 0.0])
    jac = lambda t, x, u: (1 - np.tanh(W @ x) ** 2)[:, None] * W
    ivp = ControlledIVP(f=f, jac_x=jac, x0=rng.standard_normal(2), T=2.0)
    grids = Grids.uniform(2.0, 4, 4 * int(rng.integers(2, 10)))
    return ivp, grids, InputPolicy(grids.control, rng.standard_normal(5))


def test_4_calibration():
    with criterion(4, "calibrated scale matches an independent dense EKF") as c:
        worst = 0.0
        for seed in range(6):
            ivp, grids, pol = _random_nonlinear(seed)
            for p in (1, 2):
                model = IWPModel(p, 2)
                post = ode_filter_smoother(ivp, pol, grids, model)
                tps = [transition_matrices(model, h) for h in np.diff(grids.integration)]
                ref = dense_ekf_calibration(
                    ivp.f, ivp.jac_x, grids.integration, taylor_init(ivp, pol, model), np.zeros((model.n, model.n)),
                    [s.A for s in tps], [s.Qn for s in tps], pol, 2,
                )
                worst = max(worst, abs(post.kappa_hat - ref) / abs(ref))
        ivp, _ = zero_example()
        grids = Grids.uniform(1.0, 2, 8)
        zero = ode_filter_smoother(ivp, InputPolicy(grids.control), grids, IWPModel(2, 2)).kappa_hat
        c["detail"] = f"max relative deviation {worst:.1e}, vanishing residuals give {zero!r}"
        assert worst <= 1e-12 and zero == 0.0


def _stabilizing_theta():
    return np.array([-10.0, -9.7, 1.8, 1.7, 1.5, 1.3, 1.0, 0.84, 0.68, 0.54, 0.43,
                     0.35, 0.28, 0.22, 0.17, 0.14, 0.11, 0.09, 0.08, 0.04, 0.09])


def test_5_kappa_invariance():
    with criterion(5, "external scale leaves means and unscaled factors bitwise unchanged") as c:
        ivp, _ = logistic_example()
        grids = Grids.uniform(5.0, 20, 40)
        pol = InputPolicy(grids.control, _stabilizing_theta())
        for p in (1, 2):
            runs = [ode_filter_smoother(ivp, pol, grids, IWPModel(p, 2), kappa=k) for k in (0.1, 1.0, 10.0)]
            for r in runs[1:]:
                assert r.means.tobytes() == runs[0].means.tobytes()
                assert r.cov_sqrt.tobytes() == runs[0].cov_sqrt.tobytes()
        c["detail"] = "kappa in {0.1, 1, 10}, p in {1, 2}"


def test_6_gradient_check():
    with criterion(6, "gradient matches central differences on the logistic OCP", budget=60) as c:
        ivp, d = logistic_example()
        worst = 0.0
        for seed in (0, 1, 2, 3, 4):
            # random inputs around a stabilizing one; far from it the state escapes
            # and central differences themselves lose accuracy
            theta = _stabilizing_theta() + np.random.default_rng(seed).uniform(-1.0, 1.0, 21)
            for mode in ("proposed", "classical"):
                spec = OCPSpec(d.Q_cost, d.R_cost, Grids.uniform(5.0, 20, 40), IWPModel(2, 2), mode=mode)
                g = gradient(spec, ivp, theta)
                fd = finite_difference_gradient(lambda th: expected_cost(spec, ivp, th).total, theta)
                rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-8 * np.abs(fd).max())
                worst = max(worst, rel.max())
        c["detail"] = f"max componentwise relative deviation {worst:.1e}"
        assert worst <= 1e-4


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_7_openloop_trend(tmp_path):
    with criterion(7, "open loop at N_int=40: proposed has lower and better predicted ground-truth cost", budget=600) as c:
        run_openloop(ExperimentConfig(n_int=(40,), out=tmp_path))
        last = {m: _read_csv(tmp_path / f"openloop_{m}.csv")[-1] for m in ("classical", "proposed")}
        assert all(len(_read_csv(tmp_path / f"openloop_{m}.csv")) == 21 for m in last)
        gt = {m: float(r["cumulative_ground_truth_cost"]) for m, r in last.items()}
        pred = {m: float(r["cumulative_predicted_cost"]) for m, r in last.items()}
        gap = {m: abs(pred[m] - gt[m]) for m in last}
        c["detail"] = (
            f"ground truth classical {gt['classical']:.4f} vs proposed {gt['proposed']:.4f}; "
            f"|pred - gt| classical {gap['classical']:.4f} vs proposed {gap['proposed']:.4f}"
        )
        assert gt["proposed"] < gt["classical"]
        assert gap["proposed"] < gap["classical"]


def test_8_sweep_trend(tmp_path):
    with criterion(8, "sweep: proposed no worse for N_int<=60, modes within 2% at N_int=160", budget=1800) as c:
        run_sweep(ExperimentConfig(n_int=DEFAULT_SWEEP, out=tmp_path))
        rows = _read_csv(tmp_path / "sweep.csv")
        assert len(rows) == 12
        gt = {(int(r["n_int"]), r["mode"]): float(r["ground_truth_cost"]) for r in rows}
        c["detail"] = "; ".join(f"{n}: {gt[n, 'classical']:.3f}/{gt[n, 'proposed']:.3f}" for n in DEFAULT_SWEEP)
        for n in (20, 40, 60):
            assert gt[n, "proposed"] <= gt[n, "classical"]
        a, b = gt[160, "classical"], gt[160, "proposed"]
        assert abs(a - b) / min(a, b) < 0.02


def test_9_degenerate_problems():
    with criterion(9, "zero field and single-interval problems are exact and cost nothing") as c:
        checked = 0
        for d, N, N_int in ((1, 1, 1), (2, 1, 4), (2, 3, 6)):
            ivp, _ = zero_example(d=d)
            grids = Grids.uniform(1.0, N, N_int)
            for p in (1, 2, 3):
                for smoother in ("eks", "ieks"):
                    post = ode_filter_smoother(ivp, InputPolicy(grids.control), grids, IWPModel(p, d), mode=smoother)
                    assert post.kappa_hat == 0.0
                    assert np.all(post.scaled_cov() == 0.0) and np.all(post.means == 0.0)
                    for mode in ("proposed", "classical"):
                        spec = OCPSpec(np.eye(d), np.eye(1), grids, IWPModel(p, d), mode=mode, smoother_mode=smoother)
                        theta = np.zeros(spec.n_params)
                        assert expected_cost(spec, ivp, theta).total == 0.0
                        assert np.all(gradient(spec, ivp, theta) == 0.0)
                        checked += 1
        c["detail"] = f"{checked} problem/solver combinations"
