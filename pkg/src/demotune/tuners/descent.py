"""Gradient descent on the tuning cost and on its negative log-likelihood."""

import math
import time

import numpy as np

from demotune.errors import DemoTuneError, GradientEvaluationError, InvalidConfigError
from demotune.planner import PlannerParams
from demotune.simloop import residuals, simulate
from demotune.tuners.common import (
    ClosedLoopCost,
    TuneConfig,
    TuneTrace,
    evaluator,
    numerical_gradient,
)


def descend(
    objective,
    x0,
    *,
    gamma,
    K,
    epsilon,
    h,
    max_halvings=20,
    grow_after=3,
    gamma_cap=100.0,
    evaluate=None,
    record=None,
):
    """Minimize ``objective`` by numerical-gradient steps with backtracking.

    A step ``x - gamma * g`` is accepted only if it lowers the objective;
    otherwise ``gamma`` is halved, at most ``max_halvings`` times. After
    ``grow_after`` consecutive accepts ``gamma`` doubles, capped at
    ``gamma_cap`` times its initial value. Stops when the objective changes by
    less than ``epsilon`` or after ``K`` iterations.

    ``record(k, x, f)`` is called for the start point and every accepted
    step. Returns ``(x, f, termination, message)``.
    """
    x = np.asarray(x0, dtype=float).copy()
    f = objective(x)
    if record:
        record(0, x, f)
    if f == -math.inf:
        return x, f, "converged", "objective unbounded below at start"
    gamma0 = gamma
    streak = 0
    for k in range(1, K + 1):
        try:
            g = numerical_gradient(objective, x, h, evaluate)
        except GradientEvaluationError as exc:
            return x, f, "error", str(exc)
        if not np.any(g):
            return x, f, "converged", "zero gradient"
        for _ in range(max_halvings + 1):
            cand = x - gamma * g
            fc = objective(cand)
            if fc < f:
                break
            gamma *= 0.5
            streak = 0
        else:
            return x, f, "converged", f"no decrease after {max_halvings} step halvings"
        x, f_prev, f = cand, f, fc
        if record:
            record(k, x, f)
        if f == -math.inf:
            return x, f, "converged", "objective unbounded below"
        streak += 1
        if streak >= grow_after:
            gamma = min(2.0 * gamma, gamma_cap * gamma0)
            streak = 0
        if abs(f_prev - f) < epsilon:
            return x, f, "converged", "cost change below threshold"
    return x, f, "max-iter", f"reached K={K} iterations"


class _LogCost:
    """``ln J``; ``-inf`` for a perfect fit."""

    def __init__(self, cost):
        self.cost = cost

    def __call__(self, tilde):
        J = self.cost(tilde)
        return math.log(J) if J > 0 else -math.inf


def _run(demo, p0, cfg, planner_cfg, weights, log_likelihood):
    cfg = cfg or TuneConfig()
    cost = ClosedLoopCost(demo, planner_cfg, weights)
    space = cost.space
    if not p0.within(cost.cfg.bounds):
        raise InvalidConfigError("initial parameters outside the weight bounds")
    trace = TuneTrace()
    start = time.perf_counter()
    objective = _LogCost(cost) if log_likelihood else cost

    def record(k, x, f):
        J = math.exp(f) if log_likelihood else f
        trace.append(k, space.to_params(x).as_array(), J)

    x0 = space.to_tilde(p0)
    try:
        with evaluator(cfg.workers) as ev:
            x, _, status, msg = descend(
                objective,
                x0,
                gamma=cfg.gamma,
                K=cfg.K,
                epsilon=cfg.epsilon,
                h=cfg.fd_step,
                max_halvings=cfg.max_halvings,
                grow_after=cfg.grow_after,
                gamma_cap=cfg.gamma_cap,
                evaluate=ev,
                record=record,
            )
    except DemoTuneError as exc:
        trace.termination = "numerical-failure"
        trace.message = str(exc)
        if trace.iterations:
            trace.final_params = PlannerParams.from_array(trace.iterations[-1].params)
        else:
            trace.final_params = p0
        trace.wall_time = time.perf_counter() - start
        return trace
    trace.termination = status
    trace.message = msg
    trace.final_params = space.to_params(x)
    trace.wall_time = time.perf_counter() - start
    return trace


def tune_gd(demo, p0, cfg=None, planner_cfg=None, weights=None):
    """Tune planner weights by gradient descent on the tuning cost."""
    return _run(demo, p0, cfg, planner_cfg, weights, log_likelihood=False)


def residual_covariance(sim, demo):
    """``(1/T) sum_t r_t r_t^T`` of the 4-dimensional state residuals."""
    r = residuals(sim, demo)
    T = max(r.shape[0] - 1, 1)
    return r.T @ r / T


def tune_ml(demo, p0, cfg=None, planner_cfg=None, weights=None):
    """Maximum-likelihood tuning: maximize ``-ln J`` by gradient ascent.

    The trace records ``J``; ``extras['residual_covariance']`` holds the
    residual covariance of the final closed-loop run.
    """
    trace = _run(demo, p0, cfg, planner_cfg, weights, log_likelihood=True)
    cost = ClosedLoopCost(demo, planner_cfg, weights)
    sim = simulate(demo, trace.final_params, cost.cfg)
    trace.extras["residual_covariance"] = residual_covariance(sim, demo)
    return trace
