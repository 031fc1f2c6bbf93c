"""Linear time-varying MPC for lane keeping.

The horizon problem stacks ``z = [x_0, ..., x_N, u_0, ..., u_N]`` and
penalizes the deviation from ``x_r = [0, theta_r, kappa_r, kappa_dot_r]``
with ``diag(w_d, w_theta, w_kappa, w_kappa_dot)`` plus ``w_u * u^2`` at every
step ``n = 0..N``. States and inputs are boxed; the dynamics use the speed
and reference heading previewed for each step.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import lsq_linear

from demotune.errors import InvalidConfigError, InvalidInputError, NumericalFailure
from demotune.model import NP, NX, Bounds, system_matrices
from demotune.qp import QpProblem, QpSettings, QpSolution, QpStatus, primal_active_set, solve_qp
from demotune.qp import residuals as qp_residuals

SLACK_WEIGHT = 1e6

PARAM_NAMES = ("w_d", "w_theta", "w_kappa", "w_kappa_dot", "w_u")


@dataclass(frozen=True)
class PlannerParams:
    w_d: float
    w_theta: float
    w_kappa: float
    w_kappa_dot: float
    w_u: float

    def __post_init__(self):
        for name in PARAM_NAMES:
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise InvalidConfigError(f"{name} must be finite and non-negative, got {value!r}")

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values, dtype=float).reshape(-1)
        if values.size != NP:
            raise InvalidConfigError(f"expected {NP} weights, got {values.size}")
        return cls(*(float(v) for v in values))

    def as_array(self):
        return np.array([self.w_d, self.w_theta, self.w_kappa, self.w_kappa_dot, self.w_u])

    def scaled(self, c):
        return PlannerParams.from_array(c * self.as_array())

    def to_dict(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(*(float(data[name]) for name in PARAM_NAMES))
        except KeyError as exc:
            raise InvalidConfigError(f"missing weight {exc.args[0]!r}") from None

    def within(self, bounds):
        p = self.as_array()
        return bool(np.all(p >= bounds.p_min) and np.all(p <= bounds.p_max))


#: Hand-tuned initial weights of the lateral planner.
P0_DEFAULT = PlannerParams(3.443, 0.535, 0.535, 0.03, 2.26e-6)


@dataclass(frozen=True)
class PlannerConfig:
    N: int = 20
    Ts: float = 0.3
    bounds: Bounds = field(default_factory=Bounds)
    qp: QpSettings = field(default_factory=QpSettings)
    # False replaces the previewed kappa_dot_r by zero
    reference_kappa_dot: bool = True

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise InvalidConfigError(f"horizon N must be a positive integer, got {self.N!r}")
        if not np.isfinite(self.Ts) or self.Ts <= 0:
            raise InvalidConfigError(f"Ts must be positive, got {self.Ts!r}")


@dataclass
class ReferencePreview:
    theta_r: np.ndarray
    kappa_r: np.ndarray
    kappa_dot_r: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        for name in ("theta_r", "kappa_r", "kappa_dot_r", "v"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"preview {name} must be finite")
            setattr(self, name, arr)
        n = self.theta_r.size
        if not (self.kappa_r.size == self.kappa_dot_r.size == self.v.size == n):
            raise InvalidInputError("preview channels must have equal length")
        if np.any(self.v <= 0):
            raise InvalidInputError("preview speed must be positive")

    def __len__(self):
        return self.theta_r.size

    @classmethod
    def constant(cls, N, v, kappa_r=0.0, theta_r=0.0, kappa_dot_r=0.0):
        ones = np.ones(N + 1)
        return cls(theta_r * ones, kappa_r * ones, kappa_dot_r * ones, v * ones)

    def reference_states(self):
        """``(N+1, 4)`` array of ``x_r = [0, theta_r, kappa_r, kappa_dot_r]``."""
        return np.column_stack(
            [np.zeros(len(self)), self.theta_r, self.kappa_r, self.kappa_dot_r]
        )


@dataclass
class PlanResult:
    u0: float
    predicted_states: np.ndarray
    predicted_inputs: np.ndarray
    qp_status: QpStatus
    relaxed: bool
    z: np.ndarray
    y: np.ndarray


def _check(x0, preview, cfg):
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape != (NX,) or not np.all(np.isfinite(x0)):
        raise InvalidInputError("initial state must be 4 finite values")
    if len(preview) != cfg.N + 1:
        raise InvalidInputError(f"preview must have N+1={cfg.N + 1} entries, got {len(preview)}")
    return x0


def build_qp(x0, preview, params, cfg, relaxed=False):
    """Assemble the horizon QP.

    With ``relaxed=True`` every state box row ``x_n`` gets an additive slack
    ``s_n`` (appended to ``z``) penalized with ``SLACK_WEIGHT * s_n^2``.
    """
    x0 = _check(x0, preview, cfg)
    N = cfg.N
    bounds = cfg.bounds
    nxs = NX * (N + 1)
    nus = N + 1
    ns = nxs if relaxed else 0
    n = nxs + nus + ns
    p = params.as_array()

    diag = np.concatenate([np.tile(p[:NX], N + 1), np.full(nus, p[4]), np.full(ns, SLACK_WEIGHT)])
    P = np.diag(2.0 * diag)
    xr = preview.reference_states()
    q = np.zeros(n)
    q[:nxs] = -2.0 * (p[:NX] * xr).reshape(-1)

    m = NX + NX * N + nxs + nus
    A = np.zeros((m, n))
    l = np.zeros(m)
    u = np.zeros(m)

    A[:NX, :NX] = np.eye(NX)
    l[:NX] = u[:NX] = x0

    r = NX
    for k in range(N):
        Ak, Bk, Bzk = system_matrices(preview.v[k], cfg.Ts)
        rows = slice(r, r + NX)
        A[rows, NX * k : NX * (k + 1)] = Ak
        A[rows, NX * (k + 1) : NX * (k + 2)] = -np.eye(NX)
        A[rows, nxs + k] = Bk
        l[rows] = u[rows] = -Bzk * preview.theta_r[k]
        r += NX

    A[r : r + nxs, :nxs] = np.eye(nxs)
    if relaxed:
        A[r : r + nxs, nxs + nus :] = np.eye(nxs)
    l[r : r + nxs] = np.tile(bounds.x_min, N + 1)
    u[r : r + nxs] = np.tile(bounds.x_max, N + 1)
    r += nxs
    A[r:, nxs : nxs + nus] = np.eye(nus)
    l[r:] = bounds.u_min
    u[r:] = bounds.u_max
    return QpProblem(P, q, A, l, u)


def shift_solution(z, y, N, relaxed=False):
    """Shift a horizon solution one step forward for warm starting."""
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    nxs = NX * (N + 1)
    nus = N + 1

    def shift_states(v):
        blocks = v.reshape(N + 1, NX)
        return np.vstack([blocks[1:], blocks[-1:]]).reshape(-1)

    def shift_inputs(v):
        return np.concatenate([v[1:], v[-1:]])

    zs = [shift_states(z[:nxs]), shift_inputs(z[nxs : nxs + nus])]
    if relaxed:
        zs.append(shift_states(z[nxs + nus :]))
    y_init = y[:NX]
    y_dyn = y[NX : NX + NX * N].reshape(N, NX)
    y_dyn = np.vstack([y_dyn[1:], y_dyn[-1:]]).reshape(-1)
    r = NX + NX * N
    y_xbox = shift_states(y[r : r + nxs])
    y_ubox = shift_inputs(y[r + nxs :])
    return np.concatenate(zs), np.concatenate([y_init, y_dyn, y_xbox, y_ubox])


class WarmStart:
    """Per-simulation cache of the previous horizon solution (single owner)."""

    def __init__(self):
        self.z = None
        self.y = None
        self.relaxed = False

    def guess(self, N, relaxed):
        if self.z is None or self.relaxed != relaxed:
            return None
        return shift_solution(self.z, self.y, N, relaxed)

    def store(self, result):
        self.z, self.y, self.relaxed = result.z, result.y, result.relaxed


def _extract(sol, cfg, relaxed):
    N = cfg.N
    nxs = NX * (N + 1)
    states = sol.z[:nxs].reshape(N + 1, NX)
    inputs = np.clip(sol.z[nxs : nxs + N + 1], cfg.bounds.u_min, cfg.bounds.u_max)
    return PlanResult(
        u0=float(inputs[0]),
        predicted_states=states,
        predicted_inputs=inputs,
        qp_status=sol.status,
        relaxed=relaxed,
        z=sol.z,
        y=sol.y,
    )


def condense(x0, preview, cfg):
    """Return ``(c, G)`` with stacked states ``x = c + G u`` over the horizon."""
    N = cfg.N
    nxs = NX * (N + 1)
    c = np.zeros(nxs)
    G = np.zeros((nxs, N + 1))
    c[:NX] = x0
    for k in range(N):
        Ak, Bk, Bzk = system_matrices(preview.v[k], cfg.Ts)
        cur, nxt = slice(NX * k, NX * (k + 1)), slice(NX * (k + 1), NX * (k + 2))
        c[nxt] = Ak @ c[cur] + Bzk * preview.theta_r[k]
        G[nxt] = Ak @ G[cur]
        G[nxt, k] += Bk
    return c, G


def _refine_bounded_lsq(M, b, lb, ub, x, max_iter=None):
    """Warm-started active-set pass for ``min |M x - b|`` on a box.

    Polishes a near-optimal ``x``: bound variables whose gradient points
    into the box are freed one at a time and the free block is re-solved,
    stepping back to the box when the new point leaves it.
    """
    n = x.size
    max_iter = max_iter or 10 * n
    x = np.clip(x, lb, ub)
    width = ub - lb
    free = (x > lb + 1e-12 * width) & (x < ub - 1e-12 * width)
    for _ in range(max_iter):
        # inner loop: minimize over the free set, staying feasible
        while np.any(free):
            idx = np.flatnonzero(free)
            rhs = b - M[:, ~free] @ x[~free]
            Mf = M[:, idx]
            zf = np.linalg.lstsq(Mf, rhs, rcond=None)[0]
            # the free block is badly conditioned; correct on the residual
            for _ in range(3):
                zf = zf + np.linalg.lstsq(Mf, rhs - Mf @ zf, rcond=None)[0]
            inside = (zf > lb[idx]) & (zf < ub[idx])
            if np.all(inside):
                x[idx] = zf
                break
            d = zf - x[idx]
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(d > 0, (ub[idx] - x[idx]) / d, np.where(d < 0, (lb[idx] - x[idx]) / d, np.inf))
            alpha = np.clip(np.min(ratio[~inside]), 0.0, 1.0)
            x[idx] = np.clip(x[idx] + alpha * d, lb[idx], ub[idx])
            hit = idx[~inside & (ratio <= alpha + 1e-14)]
            free[hit] = False
            x[hit] = np.where(x[hit] - lb[hit] < ub[hit] - x[hit], lb[hit], ub[hit])
        w = M.T @ (b - M @ x)
        viol = np.where(x <= lb, np.maximum(w, 0.0), np.where(x >= ub, np.maximum(-w, 0.0), 0.0))
        viol[free] = 0.0
        j = int(np.argmax(viol))
        if viol[j] <= 1e-10 * max(1.0, np.max(np.abs(w))):
            break
        free[j] = True
    return x


def solve_relaxed(x0, preview, params, cfg):
    """Solve the slack-relaxed horizon QP in condensed form.

    The relaxed problem is far too ill-conditioned for the general QP solver
    (the slack weight against a fourth-order integrator). Eliminating the
    states and writing ``v = x + s`` turns it into a bounded least-squares
    problem in ``[u, v]``, which is solved on the matrix itself rather than
    its normal equations. Its feasible point then starts a primal active-set
    solve on the sparse KKT system of ``build_qp(..., relaxed=True)``; if that fails,
    multipliers are rebuilt from stationarity instead. Residual tolerances
    are relative to the problem scale.
    """
    x0 = _check(x0, preview, cfg)
    N = cfg.N
    bounds = cfg.bounds
    nxs, nus = NX * (N + 1), N + 1
    c, G = condense(x0, preview, cfg)
    p = params.as_array()
    Wf = np.tile(p[:NX], N + 1)
    xr = preview.reference_states().reshape(-1)
    # unknowns [u, v] with v = x + s the slackened state, boxed like x
    sw, r = np.sqrt(Wf), np.sqrt(SLACK_WEIGHT)
    M = np.block(
        [
            [sw[:, None] * G, np.zeros((nxs, nxs))],
            [np.sqrt(p[4]) * np.eye(nus), np.zeros((nus, nxs))],
            [-r * G, r * np.eye(nxs)],
        ]
    )
    rhs = np.concatenate([sw * (xr - c), np.zeros(nus), r * c])
    lb = np.concatenate([np.full(nus, bounds.u_min), np.tile(bounds.x_min, N + 1)])
    ub = np.concatenate([np.full(nus, bounds.u_max), np.tile(bounds.x_max, N + 1)])
    fit = lsq_linear(M, rhs, bounds=(lb, ub), method="bvls", tol=1e-12, max_iter=20 * M.shape[1])
    sol = _refine_bounded_lsq(M, rhs, lb, ub, fit.x)
    u = np.clip(sol[:nus], bounds.u_min, bounds.u_max)
    x = c + G @ u
    out = x - np.clip(x, lb[nus:], ub[nus:])
    z = np.concatenate([x, u, -out])
    g = 2.0 * (p[4] * u + G.T @ (Wf * (x - xr) + SLACK_WEIGHT * out))
    lo, hi = lb[:nus], ub[:nus]

    W = Wf.reshape(N + 1, NX)
    e = (x - xr).reshape(N + 1, NX)
    y_box = (SLACK_WEIGHT * 2.0 * out).reshape(N + 1, NX)
    lam = np.zeros((N, NX))
    mats = [system_matrices(preview.v[k], cfg.Ts) for k in range(N)]
    lam[N - 1] = 2.0 * W[N] * e[N] + y_box[N]
    for k in range(N - 1, 0, -1):
        lam[k - 1] = 2.0 * W[k] * e[k] + y_box[k] + mats[k][0].T @ lam[k]
    y_init = -(2.0 * W[0] * e[0] + y_box[0] + mats[0][0].T @ lam[0])
    # inputs: stationarity gives -g; keep only the sign each bound allows
    at = 1e-9 * (hi - lo)
    y_u = np.where(
        u <= lo + at, np.minimum(-g, 0.0), np.where(u >= hi - at, np.maximum(-g, 0.0), 0.0)
    )
    y = np.concatenate([y_init, lam.reshape(-1), y_box.reshape(-1), y_u])

    prob = build_qp(x0, preview, params, cfg, relaxed=True)
    prim, dual = qp_residuals(prob, z, y)
    if not np.all(np.isfinite(z)):
        return QpSolution(z, y, QpStatus.MAX_ITER, prim, dual, 0)
    Az = prob.A @ z
    prim_scale = max(1.0, np.max(np.abs(Az)), np.max(np.abs(z)))
    dual_scale = max(
        1.0,
        np.max(np.abs(prob.P @ z)),
        np.max(np.abs(prob.q)),
        np.max(np.abs(prob.A.T @ y)),
    )
    # the sparse KKT system is far better conditioned than the condensed
    # least-squares problem; the clipped point above is feasible for it
    settings = replace(cfg.qp, eps_prim=cfg.qp.eps_prim * prim_scale, eps_dual=cfg.qp.eps_dual * dual_scale)
    polished = primal_active_set(prob, z, settings)
    if polished is not None:
        return polished
    ok = prim <= settings.eps_prim and dual <= settings.eps_dual
    status = QpStatus.SOLVED if ok else QpStatus.MAX_ITER
    return QpSolution(z, y, status, prim, dual, 0)


def plan(x0, preview, params, cfg, warm_start=None):
    """Solve the horizon problem and return the first input.

    Falls back to the slack-relaxed problem when the hard problem is not
    solved (e.g. ``x0`` outside the state box). Inputs are never relaxed.
    """
    x0 = _check(x0, preview, cfg)
    bounds = cfg.bounds
    # a start outside the state box makes the hard problem infeasible outright
    outside = np.any(x0 < bounds.x_min) or np.any(x0 > bounds.x_max)
    sol = None
    if not outside:
        guess = warm_start.guess(cfg.N, False) if warm_start is not None else None
        sol = solve_qp(build_qp(x0, preview, params, cfg), cfg.qp, guess)
    relaxed = False
    if sol is None or sol.status is not QpStatus.SOLVED:
        relaxed = True
        sol = solve_relaxed(x0, preview, params, cfg)
        if sol.status is not QpStatus.SOLVED:
            raise NumericalFailure(
                f"relaxed planner QP not solved (dual residual {sol.dual_residual:.3g})"
            )
    result = _extract(sol, cfg, relaxed)
    if warm_start is not None:
        warm_start.store(result)
    return result
