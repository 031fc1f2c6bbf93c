"""Joint state and weight estimation with an unscented Kalman filter.

The filter state is ``[x; p_tilde]``: the four lateral states followed by
the five planner weights in unbounded coordinates. Weights follow a random
walk; the states follow the closed loop, where each sigma point runs the
planner with its own weights from its own state.
"""

import time

import numpy as np
import scipy.linalg as sla

from demotune.errors import InvalidConfigError, NumericalFailure
from demotune.model import C, NP, NX, step
from demotune.planner import WarmStart, plan
from demotune.simloop import initial_state, preview_at
from demotune.tuners.common import ClosedLoopCost, TuneConfig, TuneTrace

PSD_FLOOR = -1e-10
JITTER = 1e-9


class MerweSigmaPoints:
    """Scaled symmetric sigma points (``2n + 1`` of them)."""

    def __init__(self, n, alpha=1e-1, beta=2.0, kappa=0.0):
        self.n = n
        self.lam = alpha**2 * (n + kappa) - n
        c = 0.5 / (n + self.lam)
        self.Wm = np.full(2 * n + 1, c)
        self.Wc = np.full(2 * n + 1, c)
        self.Wm[0] = self.lam / (n + self.lam)
        self.Wc[0] = self.lam / (n + self.lam) + (1.0 - alpha**2 + beta)

    def __call__(self, mean, cov):
        L = np.linalg.cholesky((self.n + self.lam) * cov)
        pts = np.empty((2 * self.n + 1, self.n))
        pts[0] = mean
        pts[1 : self.n + 1] = mean + L.T
        pts[self.n + 1 :] = mean - L.T
        return pts

    def moments(self, pts, noise=None):
        mean = self.Wm @ pts
        dev = pts - mean
        cov = (self.Wc[:, None] * dev).T @ dev
        if noise is not None:
            cov = cov + noise
        return mean, cov


def repair_covariance(P):
    """Symmetrize ``P`` and add jitter once if it is not numerically PSD."""
    P = 0.5 * (P + P.T)
    if np.min(np.linalg.eigvalsh(P)) >= PSD_FLOOR:
        return P
    P = P + JITTER * np.eye(P.shape[0])
    if np.min(np.linalg.eigvalsh(P)) < PSD_FLOOR:
        raise NumericalFailure("covariance is not positive semidefinite after jitter")
    return P


class UnscentedKalmanFilter:
    """Standard additive-noise UKF.

    ``fx(points, **kw)`` maps an ``(npts, n)`` array of sigma points through
    the process model; ``hx(points)`` through the measurement model.
    """

    def __init__(self, fx, hx, Q, R, points):
        self.fx = fx
        self.hx = hx
        self.Q = np.asarray(Q, dtype=float)
        self.R = np.asarray(R, dtype=float)
        self.points = points
        self.x = None
        self.P = None

    def _sigma(self):
        try:
            return self.points(self.x, self.P)
        except np.linalg.LinAlgError:
            self.P = self.P + JITTER * np.eye(self.P.shape[0])
            try:
                return self.points(self.x, self.P)
            except np.linalg.LinAlgError:
                raise NumericalFailure("covariance lost positive definiteness") from None

    def predict(self, **kw):
        Y = self.fx(self._sigma(), **kw)
        self.x, P = self.points.moments(Y, self.Q)
        self.P = repair_covariance(P)

    def update(self, z):
        X = self._sigma()
        Z = self.hx(X)
        zhat, S = self.points.moments(Z, self.R)
        dx = X - self.x
        dz = Z - zhat
        Pxz = (self.points.Wc[:, None] * dx).T @ dz
        K = sla.solve(S, Pxz.T, assume_a="pos").T
        self.x = self.x + K @ (np.asarray(z, dtype=float) - zhat)
        self.P = repair_covariance(self.P - K @ S @ K.T)


class _ClosedLoopProcess:
    """Closed-loop step for a set of augmented sigma points."""

    def __init__(self, demo, planner_cfg, space, npts):
        self.demo = demo
        self.cfg = planner_cfg
        self.space = space
        self.warm = [WarmStart() for _ in range(npts)]

    def reset(self):
        self.warm = [WarmStart() for _ in self.warm]

    def __call__(self, pts, t):
        preview = preview_at(self.demo, t, self.cfg.N, self.cfg.reference_kappa_dot)
        v, theta_r = self.demo.v[t], self.demo.theta_r[t]
        out = pts.copy()
        for i, pt in enumerate(pts):
            params = self.space.to_params(pt[NX:])
            res = plan(pt[:NX], preview, params, self.cfg, self.warm[i])
            out[i, :NX] = step(pt[:NX], res.u0, v, theta_r, self.cfg.Ts)
        return out


def _measure(pts):
    return pts[:, :NX]


def tune_ukf(demo, p0, cfg=None, planner_cfg=None, weights=None):
    """Estimate planner weights by filtering the demonstration.

    Each epoch re-anchors the state part at ``C y_d[0]`` and runs one pass
    over the trace, carrying the weight posterior forward. The trace gets
    one entry per epoch; iteration stops once the weight estimate moves by
    less than ``cfg.epsilon`` (unbounded coordinates, max norm).
    """
    cfg = cfg or TuneConfig(method="ukf")
    uc = cfg.ukf
    cost = ClosedLoopCost(demo, planner_cfg, weights)
    space = cost.space
    pcfg = cost.cfg
    if not p0.within(pcfg.bounds):
        raise InvalidConfigError("initial parameters outside the weight bounds")
    n = NX + NP
    points = MerweSigmaPoints(n, uc.alpha, uc.beta, uc.kappa_sigma)
    Qx = cost.weights.Q if uc.Q_x is None else uc.Q_x
    Qe = sla.block_diag(np.diag(Qx), uc.mu_e * np.eye(NP))
    process = _ClosedLoopProcess(demo, pcfg, space, 2 * n + 1)
    ukf = UnscentedKalmanFilter(lambda pts, t: process(pts, t), _measure, Qe, np.diag(uc.R_e), points)
    P0 = np.diag(uc.P0)

    z = demo.y_d @ C.T
    trace = TuneTrace()
    start = time.perf_counter()
    p_tilde = space.to_tilde(p0)
    p_cov = P0[NX:, NX:].copy()
    trace.append(0, p0.as_array(), cost.cost_of_params(p0))
    trace.termination = "max-iter"
    trace.message = f"reached {uc.epochs_max} epochs"
    history = []
    try:
        for epoch in range(1, uc.epochs_max + 1):
            ukf.x = np.concatenate([initial_state(demo), p_tilde])
            ukf.P = P0.copy()
            ukf.P[NX:, NX:] = p_cov
            process.reset()
            ukf.update(z[0])
            history.append((0, ukf.x[NX:].copy(), np.diag(ukf.P)[NX:].copy()))
            for t in range(1, len(demo)):
                ukf.predict(t=t - 1)
                ukf.update(z[t])
                history.append((t, ukf.x[NX:].copy(), np.diag(ukf.P)[NX:].copy()))
            change = np.max(np.abs(ukf.x[NX:] - p_tilde))
            p_tilde = ukf.x[NX:].copy()
            p_cov = ukf.P[NX:, NX:].copy()
            params = space.to_params(p_tilde)
            trace.append(epoch, params.as_array(), cost.cost_of_params(params))
            if change < cfg.epsilon:
                trace.termination = "converged"
                trace.message = "weight estimate change below threshold"
                break
    except NumericalFailure as exc:
        trace.termination = "numerical-failure"
        trace.message = str(exc)
    trace.final_params = space.to_params(p_tilde)
    trace.extras["param_covariance"] = p_cov
    trace.extras["filter_history"] = history
    trace.wall_time = time.perf_counter() - start
    return trace
