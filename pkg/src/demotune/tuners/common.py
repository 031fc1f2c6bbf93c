"""Shared pieces of the tuners: configuration, traces, cost evaluation."""

import math
import os
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from demotune.errors import GradientEvaluationError, InvalidConfigError
from demotune.model import from_unbounded, to_unbounded
from demotune.planner import PlannerConfig, PlannerParams
from demotune.simloop import CostWeights, simulate, tuning_cost

THREADS_ENV = "DEMO_TUNE_THREADS"


@dataclass
class UkfConfig:
    alpha: float = 1e-1
    beta: float = 2.0
    kappa_sigma: float = 0.0
    mu_e: float = 1e-8
    R_e: tuple = (0.0052, 0.0052, 0.0039, 0.0001)
    P0: tuple = (1.0,) * 9
    epochs_max: int = 20
    # state block of the process noise; None uses the cost weights Q
    Q_x: tuple = None

    def __post_init__(self):
        self.R_e = tuple(float(r) for r in self.R_e)
        self.P0 = tuple(float(p) for p in self.P0)
        if self.Q_x is not None:
            self.Q_x = tuple(float(q) for q in self.Q_x)
            if len(self.Q_x) != 4 or any(not (q >= 0) for q in self.Q_x):
                raise InvalidConfigError("Q_x must be 4 non-negative values")
        if len(self.R_e) != 4 or any(not (r > 0) for r in self.R_e):
            raise InvalidConfigError("R_e must be 4 positive values")
        if len(self.P0) != 9 or any(not (p > 0) for p in self.P0):
            raise InvalidConfigError("P0 must be 9 positive diagonal values")
        if not (self.alpha > 0) or self.mu_e < 0 or self.epochs_max < 1:
            raise InvalidConfigError("invalid unscented filter settings")


@dataclass
class TuneConfig:
    method: str = "gd"
    gamma: float = 0.002
    K: int = 10_000
    epsilon: float = 0.001
    fd_step: float = 1e-3
    max_halvings: int = 20
    grow_after: int = 3
    gamma_cap: float = 100.0
    workers: int = 1
    ukf: UkfConfig = field(default_factory=UkfConfig)

    def __post_init__(self):
        if self.method not in ("gd", "ukf", "ml"):
            raise InvalidConfigError(f"unknown method {self.method!r}; use gd, ukf or ml")
        if not (self.gamma > 0):
            raise InvalidConfigError("gamma must be positive")
        if int(self.K) != self.K or self.K < 1:
            raise InvalidConfigError("K must be a positive integer")
        self.K = int(self.K)
        if not (self.epsilon >= 0):
            raise InvalidConfigError("epsilon must be non-negative")
        if not (self.fd_step > 0):
            raise InvalidConfigError("fd_step must be positive")
        if isinstance(self.ukf, dict):
            self.ukf = UkfConfig(**self.ukf)


@dataclass
class TraceEntry:
    k: int
    params: np.ndarray
    cost: float


@dataclass
class TuneTrace:
    iterations: list = field(default_factory=list)
    final_params: PlannerParams = None
    termination: str = "max-iter"
    wall_time: float = 0.0
    message: str = ""
    extras: dict = field(default_factory=dict)

    def append(self, k, params, cost):
        self.iterations.append(TraceEntry(k, np.asarray(params, dtype=float).copy(), float(cost)))

    @property
    def costs(self):
        return np.array([e.cost for e in self.iterations])

    @property
    def initial_cost(self):
        return self.iterations[0].cost

    @property
    def final_cost(self):
        return self.iterations[-1].cost


def resolve_workers(requested=None):
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvalidConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return max(1, int(requested or 1))


class ParamSpace:
    """tanh substitution between bounded weights and unbounded variables."""

    def __init__(self, bounds):
        self.lo = bounds.p_min
        self.hi = bounds.p_max

    def to_tilde(self, params):
        p = params.as_array() if isinstance(params, PlannerParams) else np.asarray(params, float)
        return to_unbounded(p, self.lo, self.hi)

    def to_params(self, tilde):
        return PlannerParams.from_array(from_unbounded(np.asarray(tilde, float), self.lo, self.hi))


class ClosedLoopCost:
    """Picklable ``p_tilde -> J`` for one demonstration."""

    def __init__(self, demo, planner_cfg=None, weights=None):
        self.demo = demo
        self.cfg = planner_cfg or PlannerConfig()
        self.weights = weights or CostWeights()
        self.space = ParamSpace(self.cfg.bounds)

    def cost_of_params(self, params):
        return tuning_cost(simulate(self.demo, params, self.cfg), self.demo, self.weights)

    def __call__(self, tilde):
        return self.cost_of_params(self.space.to_params(tilde))


class Evaluator:
    """Map a function over points, serially or on a process pool."""

    def __init__(self, pool=None):
        self.pool = pool

    def map(self, fn, points):
        if self.pool is None:
            return [fn(p) for p in points]
        return list(self.pool.map(fn, points))


@contextmanager
def evaluator(workers):
    workers = resolve_workers(workers)
    if workers <= 1:
        yield Evaluator()
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield Evaluator(pool)


def numerical_gradient(cost_fn, p_tilde, h, evaluate=None):
    """Central-difference gradient of ``cost_fn`` at ``p_tilde``.

    The ``2n`` perturbed evaluations are independent and go through
    ``evaluate`` (an :class:`Evaluator`) when given.
    """
    x = np.asarray(p_tilde, dtype=float)
    n = x.size
    points = []
    for i in range(n):
        for sign in (1.0, -1.0):
            pt = x.copy()
            pt[i] += sign * h
            points.append(pt)
    values = (evaluate or Evaluator()).map(cost_fn, points)
    g = np.empty(n)
    for i in range(n):
        jp, jm = values[2 * i], values[2 * i + 1]
        for val in (jp, jm):
            if not math.isfinite(val):
                raise GradientEvaluationError(i, val)
        g[i] = (jp - jm) / (2.0 * h)
    return g


def richardson_check(cost_fn, p_tilde, h, evaluate=None):
    """Compare the gradient at steps ``h`` and ``h/2``.

    Returns ``(g_h, g_h2, rel)`` where ``rel[i] = |g_h[i] - g_h2[i]|`` over
    ``max(|g_h[i]|, |g_h2[i]|)``. Components that are negligible next to the
    largest one (below ``1e-8`` of it) are measured against that floor
    instead, so a zero component does not divide by zero.
    """
    g1 = numerical_gradient(cost_fn, p_tilde, h, evaluate)
    g2 = numerical_gradient(cost_fn, p_tilde, 0.5 * h, evaluate)
    scale = np.maximum(np.abs(g1), np.abs(g2))
    floor = 1e-8 * max(float(np.max(scale)), 0.0)
    denom = np.maximum(scale, floor)
    rel = np.divide(np.abs(g1 - g2), denom, out=np.zeros_like(g1), where=denom > 0)
    return g1, g2, rel
