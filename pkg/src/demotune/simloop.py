"""Closed-loop resimulation of a demonstration and the tuning cost."""

from dataclasses import dataclass, field

import numpy as np

from demotune.errors import InvalidInputError
from demotune.model import C, NX, step
from demotune.planner import ReferencePreview, WarmStart, plan


@dataclass
class SimResult:
    states: np.ndarray  # (T+1, 4)
    inputs: np.ndarray  # (T,)
    relax_count: int = 0


@dataclass(frozen=True)
class CostWeights:
    Q: tuple = (1.0, 1.0, 1.0, 1e-8)

    def __post_init__(self):
        q = tuple(float(x) for x in self.Q)
        if len(q) != NX or any(not (x >= 0) or not np.isfinite(x) for x in q):
            raise InvalidInputError("cost weights must be 4 finite non-negative values")
        object.__setattr__(self, "Q", q)


@dataclass
class DeviationReport:
    sum_dd2: float
    sum_dtheta2: float
    sum_dkappa2: float
    cost: float

    def to_dict(self):
        return {
            "sum_dd2": self.sum_dd2,
            "sum_dtheta2": self.sum_dtheta2,
            "sum_dkappa2": self.sum_dkappa2,
            "cost": self.cost,
        }


def preview_at(demo, t, N, use_kappa_dot=True):
    """Reference over ``t..t+N``, holding the last sample near the trace end."""
    idx = np.minimum(np.arange(t, t + N + 1), len(demo) - 1)
    kd = demo.kappa_dot_r[idx] if use_kappa_dot else np.zeros(N + 1)
    return ReferencePreview(demo.theta_r[idx], demo.kappa_r[idx], kd, demo.v[idx])


def initial_state(demo):
    """``C @ y_d[0]``: start on the demonstration with zero curvature rate."""
    return C @ demo.y_d[0]


def simulate(demo, params, cfg, x0=None):
    """Replay ``demo``'s reference through planner and model.

    Parameters
    ----------
    demo : Demonstration
        Trace on the planner grid (``demo.ts_grid == cfg.Ts``).
    params : PlannerParams
    cfg : PlannerConfig
    x0 : array_like, optional
        Initial state; defaults to :func:`initial_state`.
    """
    if len(demo) < cfg.N + 1:
        raise InvalidInputError(f"demonstration has {len(demo)} samples, needs at least N+1={cfg.N + 1}")
    if abs(demo.ts_grid - cfg.Ts) > 1e-9:
        raise InvalidInputError(f"demonstration period {demo.ts_grid} differs from Ts={cfg.Ts}")
    T = len(demo) - 1
    states = np.empty((T + 1, NX))
    inputs = np.empty(T)
    states[0] = initial_state(demo) if x0 is None else np.asarray(x0, dtype=float)
    warm = WarmStart()
    relax_count = 0
    for t in range(T):
        res = plan(states[t], preview_at(demo, t, cfg.N, cfg.reference_kappa_dot), params, cfg, warm)
        relax_count += res.relaxed
        inputs[t] = res.u0
        states[t + 1] = step(states[t], res.u0, demo.v[t], demo.theta_r[t], cfg.Ts)
    return SimResult(states, inputs, relax_count)


def residuals(sim, demo):
    """``(T+1, 4)`` array of ``x_t - C y_d,t``."""
    if sim.states.shape[0] != len(demo):
        raise InvalidInputError(
            f"simulation has {sim.states.shape[0]} states but demonstration {len(demo)} samples"
        )
    return sim.states - demo.y_d @ C.T


def tuning_cost(sim, demo, w=None):
    """Weighted squared deviation summed over the whole trace."""
    w = w or CostWeights()
    r = residuals(sim, demo)
    return float(np.sum(r * r * np.array(w.Q)))


def deviation_report(sim, demo, w=None):
    w = w or CostWeights()
    r = residuals(sim, demo)
    sq = np.sum(r * r, axis=0)
    return DeviationReport(
        sum_dd2=float(sq[0]),
        sum_dtheta2=float(sq[1]),
        sum_dkappa2=float(sq[2]),
        cost=tuning_cost(sim, demo, w),
    )
