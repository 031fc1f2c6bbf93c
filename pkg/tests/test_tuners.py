import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demotune.errors import GradientEvaluationError, InvalidConfigError, NumericalFailure
from demotune.model import Bounds
from demotune.planner import P0_DEFAULT, PlannerParams
from demotune.simloop import residuals, simulate
from demotune.tuners import TuneConfig, UkfConfig, tune
from demotune.tuners.common import (
    THREADS_ENV,
    ClosedLoopCost,
    ParamSpace,
    evaluator,
    numerical_gradient,
    resolve_workers,
    richardson_check,
)
from demotune.tuners.descent import _LogCost, descend, residual_covariance
from demotune.tuners.ukf import MerweSigmaPoints, UnscentedKalmanFilter, repair_covariance
from helpers import run_linear_case
from oracles import central_difference, kalman_filter


def sum_of_squares(x):
    return float(np.sum(np.asarray(x) ** 2))


# -- numerical gradient --------------------------------------------------------


def test_gradient_of_quadratic():
    g = numerical_gradient(sum_of_squares, [1.0, 0, 0, 0, 0], 1e-4)
    np.testing.assert_allclose(g, [2, 0, 0, 0, 0], atol=1e-6)


def test_gradient_of_constant_is_exactly_zero():
    g = numerical_gradient(lambda x: 3.25, np.arange(5.0), 1e-3)
    assert np.array_equal(g, np.zeros(5))


def test_gradient_matches_independent_central_difference():
    f = lambda x: math.exp(x[0]) * math.sin(x[1]) + x[2] ** 3
    x = np.array([0.3, -0.7, 1.1])
    np.testing.assert_allclose(numerical_gradient(f, x, 1e-4), central_difference(f, x, 1e-4), rtol=1e-12)


def test_gradient_rejects_non_finite_cost():
    f = lambda x: math.inf if x[2] > 0 else 0.0
    with pytest.raises(GradientEvaluationError) as info:
        numerical_gradient(f, np.zeros(5), 1e-3)
    assert "2" in str(info.value)


def test_pool_gradient_equals_serial():
    x = np.array([0.5, -1.0, 2.0, 0.0, 1.5])
    serial = numerical_gradient(sum_of_squares, x, 1e-3)
    with evaluator(2) as ev:
        pooled = numerical_gradient(sum_of_squares, x, 1e-3, ev)
    assert np.array_equal(serial, pooled)


def test_thread_env_overrides(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert resolve_workers(3) == 3
    assert resolve_workers(None) == 1
    monkeypatch.setenv(THREADS_ENV, "5")
    assert resolve_workers(3) == 5
    monkeypatch.setenv(THREADS_ENV, "many")
    with pytest.raises(InvalidConfigError):
        resolve_workers(3)


# -- descent rules on surrogate costs -----------------------------------------


def test_gd_first_step_on_quadratic():
    seen = []
    descend(lambda x: (x[0] - 2.0) ** 2, [0.0], gamma=0.1, K=1, epsilon=0.0, h=1e-4,
            record=lambda k, x, f: seen.append(x.copy()))
    assert seen[1][0] == pytest.approx(0.4, abs=1e-9)


def test_ml_first_step_on_log_cost():
    seen = []
    objective = _LogCost(lambda x: (x[0] - 2.0) ** 2 + 1.0)
    descend(objective, [0.0], gamma=0.5, K=1, epsilon=0.0, h=1e-4,
            record=lambda k, x, f: seen.append(x.copy()))
    assert seen[1][0] == pytest.approx(0.4, abs=1e-8)


def test_backtracking_keeps_costs_non_increasing():
    costs = []
    f = lambda x: float((x[0] - 2.0) ** 2 + 10 * (x[1] + 1.0) ** 2)
    x, fx, status, _ = descend(f, [0.0, 0.0], gamma=5.0, K=50, epsilon=0.0, h=1e-5,
                               record=lambda k, x, fx: costs.append(fx))
    assert np.all(np.diff(costs) <= 0)
    assert fx < 1e-6


def test_descend_stops_on_zero_gradient():
    x, f, status, _ = descend(lambda x: 1.0, [0.0, 0.0], gamma=1.0, K=5, epsilon=0.0, h=1e-3)
    assert status == "converged"


def test_ml_and_gd_gradients_are_related(clean_demo, planner_cfg, perturbed_p0):
    cost = ClosedLoopCost(clean_demo, planner_cfg)
    x = cost.space.to_tilde(perturbed_p0)
    g = numerical_gradient(cost, x, 1e-3)
    g_log = numerical_gradient(_LogCost(cost), x, 1e-3)
    # grad ln J = grad J / J, up to the O(h^2) error of each estimate
    np.testing.assert_allclose(g_log, g / cost(x), rtol=1e-3, atol=1e-6 * np.max(np.abs(g_log)))


# -- bound transform inside the tuners ----------------------------------------


@given(st.lists(st.floats(-1e6, 1e6), min_size=5, max_size=5))
@settings(max_examples=200, deadline=None)
def test_param_space_stays_in_bounds(tilde):
    space = ParamSpace(Bounds())
    p = space.to_params(np.array(tilde)).as_array()
    assert np.all(p > space.lo) and np.all(p < space.hi)


def test_tuner_rejects_start_outside_bounds(clean_demo, planner_cfg):
    bad = PlannerParams(1.0, 1.0, 1.0, 1.0, 0.5)
    for method in ("gd", "ml", "ukf"):
        with pytest.raises(InvalidConfigError):
            tune(clean_demo, bad, TuneConfig(method=method, K=1), planner_cfg)


def test_config_validation():
    with pytest.raises(InvalidConfigError):
        TuneConfig(method="newton")
    with pytest.raises(InvalidConfigError):
        TuneConfig(gamma=0.0)
    with pytest.raises(InvalidConfigError):
        UkfConfig(R_e=(1.0, 1.0, 1.0))
    with pytest.raises(InvalidConfigError):
        UkfConfig(Q_x=(1.0, 1.0, -1.0, 1.0))


# -- real loop -----------------------------------------------------------------


def test_richardson_at_interior_point(clean_demo, planner_cfg, perturbed_p0):
    cost = ClosedLoopCost(clean_demo, planner_cfg)
    _, _, rel = richardson_check(cost, cost.space.to_tilde(perturbed_p0), 1e-3)
    assert np.max(rel) <= 1e-3


def test_gd_at_truth_stops_immediately(clean_demo, planner_cfg):
    trace = tune(clean_demo, P0_DEFAULT, TuneConfig(method="gd", K=50), planner_cfg)
    assert trace.iterations[-1].k <= 1
    assert trace.final_cost <= 1e-9 * (len(clean_demo) - 1)


def test_gd_short_run_is_monotone_and_in_bounds(clean_demo, planner_cfg, perturbed_p0):
    trace = tune(clean_demo, perturbed_p0, TuneConfig(method="gd", K=3, gamma=1000.0, epsilon=1e-12), planner_cfg)
    assert np.all(np.diff(trace.costs) <= 0)
    assert trace.final_cost < trace.initial_cost
    b = planner_cfg.bounds
    for entry in trace.iterations:
        assert np.all(entry.params >= b.p_min) and np.all(entry.params <= b.p_max)


def test_ml_reports_residual_covariance(clean_demo, planner_cfg, perturbed_p0):
    trace = tune(clean_demo, perturbed_p0, TuneConfig(method="ml", K=1), planner_cfg)
    R = trace.extras["residual_covariance"]
    sim = simulate(clean_demo, trace.final_params, planner_cfg)
    r = residuals(sim, clean_demo)
    np.testing.assert_allclose(R, r.T @ r / (len(clean_demo) - 1), rtol=1e-12)
    assert np.allclose(R, R.T)


def test_residual_covariance_zero_at_truth(clean_demo, planner_cfg):
    sim = simulate(clean_demo, P0_DEFAULT, planner_cfg)
    R = residual_covariance(sim, clean_demo)
    assert np.max(np.abs(R[:3, :3])) <= 1e-12
    # kappa_dot is unmeasured: its residual is the simulated rate itself
    kd = sim.states[:, 3]
    assert R[3, 3] == pytest.approx(kd @ kd / (len(clean_demo) - 1), rel=1e-12)


# -- unscented filter ------------------------------------------------------------


def test_sigma_points_reproduce_moments():
    rng = np.random.default_rng(4)
    n = 9
    A = rng.normal(size=(n, n))
    P = A @ A.T + 0.1 * np.eye(n)
    m = rng.normal(size=n)
    sp = MerweSigmaPoints(n)
    pts = sp(m, P)
    assert pts.shape == (19, 9)
    mean, cov = sp.moments(pts)
    np.testing.assert_allclose(mean, m, atol=1e-10)
    np.testing.assert_allclose(cov, P, atol=1e-10)


@pytest.mark.parametrize("seed", range(8))
def test_ukf_equals_kalman_filter_on_linear_systems(seed):
    rng = np.random.default_rng(seed)
    assert run_linear_case(rng, n=1 + seed % 4) <= 1e-8


def test_ukf_scalar_system():
    rng = np.random.default_rng(99)
    a = 0.95
    ref_F = np.array([[a]])
    zs = [np.array([v]) for v in rng.normal(size=50)]
    ref = kalman_filter(ref_F, np.array([[0.01]]), np.eye(1), np.array([[0.2]]), [1.0], [[1.0]], zs)
    ukf = UnscentedKalmanFilter(lambda p: a * p, lambda p: p, [[0.01]], [[0.2]], MerweSigmaPoints(1))
    ukf.x, ukf.P = np.array([1.0]), np.array([[1.0]])
    for k, z in enumerate(zs):
        if k:
            ukf.predict()
        ukf.update(z)
        assert abs(ukf.x[0] - ref[k][0][0]) <= 1e-8
        assert abs(ukf.P[0, 0] - ref[k][1][0, 0]) <= 1e-8


def test_repair_covariance():
    P = np.array([[2.0, 1.0], [1.0 + 1e-14, 2.0]])
    out = repair_covariance(P)
    assert np.array_equal(out, out.T)
    slightly = np.diag([1.0, -5e-10])
    fixed = repair_covariance(slightly)
    assert np.min(np.linalg.eigvalsh(fixed)) >= -1e-10
    with pytest.raises(NumericalFailure):
        repair_covariance(np.diag([1.0, -1.0]))


def test_ukf_posterior_stays_near_truth(clean_demo, planner_cfg):
    trace = tune(clean_demo, P0_DEFAULT, TuneConfig(method="ukf", ukf=UkfConfig(epochs_max=1)), planner_cfg)
    truth = ParamSpace(planner_cfg.bounds).to_tilde(P0_DEFAULT)
    for _, mean, var in trace.extras["filter_history"]:
        assert np.all(np.abs(mean - truth) <= np.sqrt(var))
    b = planner_cfg.bounds
    for entry in trace.iterations:
        assert np.all(entry.params >= b.p_min) and np.all(entry.params <= b.p_max)
