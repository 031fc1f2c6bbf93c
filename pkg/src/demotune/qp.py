"""Operator-splitting solver for convex quadratic programs.

Solves::

    minimize    1/2 z' P z + q' z
    subject to  l <= A z <= u

with an ADMM iteration in the style of OSQP: Ruiz equilibration, a larger
penalty on equality rows, over-relaxation, residual-balancing penalty
updates, a primal infeasibility certificate and a final active-set
polishing step that solves the reduced KKT system exactly.

Badly conditioned problems (e.g. heavily penalized slacks next to tiny
input weights) can stall ADMM; when neither ADMM nor polishing certifies a
solution, a dual active-set method (Goldfarb-Idnani) finishes the job.
It needs a positive definite ``P``. A primal active-set method is also
provided for box-constrained problems that come with a feasible start.
"""

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
import scipy.linalg as sla

from demotune.errors import InvalidInputError

RHO_MIN = 1e-6
RHO_MAX = 1e6
RHO_EQ_SCALE = 1e3
MIN_SCALING = 1e-4
MAX_SCALING = 1e4


class QpStatus(str, Enum):
    SOLVED = "solved"
    MAX_ITER = "max-iter"
    PRIMAL_INFEASIBLE = "primal-infeasible"


@dataclass
class QpSettings:
    eps_prim: float = 1e-6
    eps_dual: float = 1e-6
    eps_pinf: float = 1e-7
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    max_iter: int = 4000
    adaptive_rho_interval: int = 25
    adaptive_rho_tolerance: float = 5.0
    check_interval: int = 5
    scaling_iter: int = 10
    polish: bool = True
    polish_refine_iter: int = 4
    polish_max_rounds: int = 8
    polish_delta: float = 1e-10
    active_set_fallback: bool = True


@dataclass
class QpProblem:
    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.l = np.asarray(self.l, dtype=float).reshape(-1)
        self.u = np.asarray(self.u, dtype=float).reshape(-1)
        n = self.q.size
        m = self.l.size
        if n < 1 or m < 1:
            raise InvalidInputError("QP needs at least one variable and one constraint")
        if self.P.shape != (n, n):
            raise InvalidInputError(f"P must be {n}x{n}, got {self.P.shape}")
        if self.A.shape != (m, n) or self.u.shape != (m,):
            raise InvalidInputError("constraint dimensions do not match")
        if not np.allclose(self.P, self.P.T, rtol=0.0, atol=1e-10):
            raise InvalidInputError("P must be symmetric")
        if np.any(self.l > self.u):
            raise InvalidInputError("lower bounds must not exceed upper bounds")

    @property
    def n(self):
        return self.q.size

    @property
    def m(self):
        return self.l.size

    def objective(self, z):
        return 0.5 * z @ self.P @ z + self.q @ z


@dataclass
class QpSolution:
    z: np.ndarray
    y: np.ndarray
    status: QpStatus
    primal_residual: float
    dual_residual: float
    iterations: int
    polished: bool = False

    @property
    def solved(self):
        return self.status is QpStatus.SOLVED


def residuals(prob, z, y):
    """Return ``(primal, dual)`` KKT residuals in the infinity norm."""
    Az = prob.A @ z
    prim = np.max(np.abs(np.clip(Az, prob.l, prob.u) - Az))
    dual = np.max(np.abs(prob.P @ z + prob.q + prob.A.T @ y))
    return float(prim), float(dual)


def _limit(norms):
    norms = np.where(norms < MIN_SCALING, 1.0, norms)
    return np.minimum(norms, MAX_SCALING)


def _ruiz(P, q, A, iters):
    n = P.shape[0]
    m = A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    Ps, qs, As = P.copy(), q.copy(), A.copy()
    for _ in range(iters):
        col = np.maximum(np.max(np.abs(Ps), axis=0), np.max(np.abs(As), axis=0))
        row = np.max(np.abs(As), axis=1)
        dD = 1.0 / np.sqrt(_limit(col))
        dE = 1.0 / np.sqrt(_limit(row))
        Ps = dD[:, None] * Ps * dD[None, :]
        As = dE[:, None] * As * dD[None, :]
        qs = dD * qs
        D *= dD
        E *= dE
    cost = max(np.mean(np.max(np.abs(Ps), axis=0)), np.max(np.abs(qs)))
    c = 1.0 / float(_limit(np.array([cost]))[0])
    return Ps * c, qs * c, As, D, E, c


class _Admm:
    """Single-use ADMM workspace on the scaled problem."""

    def __init__(self, prob, settings):
        self.prob = prob
        self.s = settings
        if settings.scaling_iter > 0:
            P, q, A, D, E, c = _ruiz(prob.P, prob.q, prob.A, settings.scaling_iter)
        else:
            P, q, A = prob.P, prob.q, prob.A
            D, E, c = np.ones(prob.n), np.ones(prob.m), 1.0
        self.P, self.q, self.A = P, q, A
        self.D, self.E, self.c = D, E, c
        self.l = E * prob.l
        self.u = E * prob.u
        self.eq = prob.l == prob.u
        self.rho = settings.rho
        self._set_rho_vec()

    def _set_rho_vec(self):
        rho_vec = np.full(self.prob.m, self.rho)
        rho_vec[self.eq] = self.rho * RHO_EQ_SCALE
        free = np.isinf(self.prob.l) & np.isinf(self.prob.u)
        rho_vec[free] = RHO_MIN
        self.rho_vec = rho_vec
        K = self.P + self.s.sigma * np.eye(self.prob.n) + self.A.T @ (rho_vec[:, None] * self.A)
        self.factor = sla.cho_factor(K, lower=True, check_finite=False)

    def unscale(self, z, y):
        return self.D * z, self.E * y / self.c

    def scale(self, z, y):
        return z / self.D, y * self.c / self.E

    def rho_estimate(self, z, zeta, y):
        Az = self.A @ z
        Pz = self.P @ z
        Aty = self.A.T @ y
        prim = np.max(np.abs(Az - zeta)) / max(np.max(np.abs(Az)), np.max(np.abs(zeta)), 1e-30)
        dual = np.max(np.abs(Pz + self.q + Aty)) / max(
            np.max(np.abs(Pz)), np.max(np.abs(Aty)), np.max(np.abs(self.q)), 1e-30
        )
        ratio = np.sqrt(prim / max(dual, 1e-30))
        return float(np.clip(self.rho * ratio, RHO_MIN, RHO_MAX))

    def infeasible(self, dy):
        norm = np.max(np.abs(dy))
        if norm <= 1e-30:
            return False
        # certificate checked on the unscaled data
        dy_u = self.E * dy
        norm_u = np.max(np.abs(dy_u))
        if np.max(np.abs(self.prob.A.T @ dy_u)) > self.s.eps_pinf * norm_u:
            return False
        hi = np.where(dy_u > 0, self.prob.u, 0.0)
        lo = np.where(dy_u < 0, self.prob.l, 0.0)
        if np.any(np.isinf(hi)) or np.any(np.isinf(lo)):
            return False
        support = hi @ np.maximum(dy_u, 0.0) + lo @ np.minimum(dy_u, 0.0)
        return bool(support < -self.s.eps_pinf * norm_u)

    def run(self, z0, y0):
        s = self.s
        z, y = self.scale(z0, y0)
        zeta = np.clip(self.A @ z, self.l, self.u)
        best = None
        status = QpStatus.MAX_ITER
        it = 0
        for it in range(1, s.max_iter + 1):
            y_prev = y
            rhs = s.sigma * z - self.q + self.A.T @ (self.rho_vec * zeta - y)
            z_t = sla.cho_solve(self.factor, rhs, check_finite=False)
            zeta_t = self.A @ z_t
            z = s.alpha * z_t + (1.0 - s.alpha) * z
            zeta_r = s.alpha * zeta_t + (1.0 - s.alpha) * zeta
            zeta = np.clip(zeta_r + y / self.rho_vec, self.l, self.u)
            y = y + self.rho_vec * (zeta_r - zeta)

            if it % s.check_interval == 0 or it == s.max_iter:
                zu, yu = self.unscale(z, y)
                prim, dual = residuals(self.prob, zu, yu)
                if best is None or max(prim, dual) < max(best[2], best[3]):
                    best = (zu, yu, prim, dual)
                if prim <= s.eps_prim and dual <= s.eps_dual:
                    status = QpStatus.SOLVED
                    best = (zu, yu, prim, dual)
                    break
                if self.infeasible(y - y_prev):
                    status = QpStatus.PRIMAL_INFEASIBLE
                    best = (zu, yu, prim, dual)
                    break
            if s.adaptive_rho_interval and it % s.adaptive_rho_interval == 0:
                rho_new = self.rho_estimate(z, zeta, y)
                if rho_new > self.rho * s.adaptive_rho_tolerance or rho_new < self.rho / s.adaptive_rho_tolerance:
                    self.rho = rho_new
                    self._set_rho_vec()
        zu, yu, prim, dual = best
        return QpSolution(zu, yu, status, prim, dual, it)


def _guess_active(prob, z, y):
    Az = prob.A @ z
    eq = prob.l == prob.u
    lower = (~eq) & (Az - prob.l < -y)
    upper = (~eq) & (prob.u - Az < y)
    return lower, upper


def _kkt_solve(prob, rows, rhs_b, settings):
    n = prob.n
    Aa = prob.A[rows]
    k = Aa.shape[0]
    K = np.zeros((n + k, n + k))
    K[:n, :n] = prob.P
    K[:n, n:] = Aa.T
    K[n:, :n] = Aa
    Kreg = K.copy()
    delta = settings.polish_delta
    Kreg[:n, :n] += delta * np.eye(n)
    Kreg[n:, n:] -= delta * np.eye(k)
    rhs = np.concatenate([-prob.q, rhs_b])
    try:
        lu = sla.lu_factor(Kreg, check_finite=False)
    except (ValueError, np.linalg.LinAlgError):
        return None
    sol = sla.lu_solve(lu, rhs, check_finite=False)
    for _ in range(settings.polish_refine_iter):
        sol = sol + sla.lu_solve(lu, rhs - K @ sol, check_finite=False)
    if not np.all(np.isfinite(sol)):
        return None
    return sol[:n], sol[n:]


def polish(prob, lower, upper, settings):
    """Solve the KKT system for a guessed active set, refining the guess.

    Returns a KKT-certified :class:`QpSolution` or ``None``.
    """
    eq = prob.l == prob.u
    lower = lower.copy()
    upper = upper.copy()
    tol = settings.eps_prim
    for _ in range(settings.polish_max_rounds):
        rows = np.flatnonzero(eq | lower | upper)
        b = np.where(upper, prob.u, prob.l)[rows]
        out = _kkt_solve(prob, rows, b, settings)
        if out is None:
            return None
        z, y_act = out
        y = np.zeros(prob.m)
        y[rows] = y_act
        Az = prob.A @ z
        wrong_lo = lower & (y > 0)
        wrong_up = upper & (y < 0)
        viol_lo = ~(eq | lower | upper) & (Az < prob.l - tol)
        viol_up = ~(eq | lower | upper) & (Az > prob.u + tol)
        if not (wrong_lo.any() or wrong_up.any() or viol_lo.any() or viol_up.any()):
            prim, dual = residuals(prob, z, y)
            if prim <= settings.eps_prim and dual <= settings.eps_dual:
                return QpSolution(z, y, QpStatus.SOLVED, prim, dual, 0, polished=True)
            return None
        lower = (lower & ~wrong_lo) | viol_lo
        upper = (upper & ~wrong_up) | viol_up
    return None


def primal_active_set(prob, z, settings=None, max_iter=None):
    """Primal active-set method started from a feasible ``z``.

    Every inequality row must be a coordinate-like constraint whose normals,
    together with the equality rows, stay linearly independent for any
    working set (boxes on distinct variable blocks). Each working set is
    solved on the KKT system, so the cost is monotone and the method cannot
    cycle. Returns a KKT-certified :class:`QpSolution` or ``None``.
    """
    settings = settings or QpSettings()
    # working sets stay independent, so the KKT matrix needs no
    # regularization; with large multipliers it would shift the bounds
    exact = replace(settings, polish_delta=0.0)
    eq = prob.l == prob.u
    z = np.asarray(z, dtype=float).copy()
    Az = prob.A @ z
    width = np.where(eq, 1.0, prob.u - prob.l)
    lower = ~eq & (Az <= prob.l + 1e-12 * width)
    upper = ~eq & (Az >= prob.u - 1e-12 * width)
    margin = 1e-12 * np.where(np.isfinite(width), np.maximum(width, 1.0), 1.0)
    max_iter = max_iter or 4 * prob.m
    for _ in range(max_iter):
        rows = np.flatnonzero(eq | lower | upper)
        b = np.where(upper, prob.u, prob.l)[rows]
        out = _kkt_solve(prob, rows, b, exact)
        if out is None:
            return None
        target, y_act = out
        d = target - z
        Ad = prob.A @ d
        free = ~(eq | lower | upper)
        # rows block only beyond a rounding margin, so a row just dropped
        # cannot block the next step at zero length
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(
                free & (Ad > 0),
                (prob.u + margin - Az) / Ad,
                np.where(free & (Ad < 0), (prob.l - margin - Az) / Ad, np.inf),
            )
        j = int(np.argmin(ratio))
        if ratio[j] < 1.0:
            z = z + max(ratio[j], 0.0) * d
            Az = prob.A @ z
            if Ad[j] > 0:
                upper[j] = True
            else:
                lower[j] = True
            continue
        z, Az = target, prob.A @ target
        y = np.zeros(prob.m)
        y[rows] = y_act
        wrong = np.where(lower, np.maximum(y, 0.0), np.where(upper, np.maximum(-y, 0.0), 0.0))
        k = int(np.argmax(wrong))
        if wrong[k] <= 1e-12 * max(1.0, np.max(np.abs(y))):
            prim, dual = residuals(prob, z, y)
            if prim <= settings.eps_prim and dual <= settings.eps_dual:
                return QpSolution(z, y, QpStatus.SOLVED, prim, dual, 0, polished=True)
            return None
        lower[k] = upper[k] = False
    return None


class _ActiveSet:
    """Orthogonal factorization ``J' N_act = [R; 0]`` with ``J = L^-T Q``."""

    def __init__(self, L):
        n = L.shape[0]
        self.J = sla.solve_triangular(L, np.eye(n), lower=True, trans="T", check_finite=False)
        self.R = np.zeros((n, n))
        self.k = 0

    def directions(self, normal):
        d = self.J.T @ normal
        k = self.k
        step = self.J[:, k:] @ d[k:]
        if k:
            r = sla.solve_triangular(self.R[:k, :k], d[:k], check_finite=False)
        else:
            r = np.zeros(0)
        return d, step, r

    def add(self, d):
        k = self.k
        tail = d[k:]
        norm = np.linalg.norm(tail)
        v = tail.copy()
        v[0] += np.copysign(norm, tail[0])
        vv = v @ v
        J2 = self.J[:, k:]
        if vv > 0:
            self.J[:, k:] = J2 - np.outer(J2 @ v, (2.0 / vv) * v)
        self.R[:k, k] = d[:k]
        self.R[k, k] = -np.copysign(norm, tail[0]) if vv > 0 else tail[0]
        self.k += 1

    def drop(self, j):
        k = self.k
        R = self.R
        R[:k, j : k - 1] = R[:k, j + 1 : k].copy()
        R[:k, k - 1] = 0.0
        if j < k - 1:
            Q, _ = np.linalg.qr(R[j:k, j : k - 1], mode="complete")
            R[j:k, j : k - 1] = Q.T @ R[j:k, j : k - 1]
            self.J[:, j:k] = self.J[:, j:k] @ Q
        R[k - 1, :] = 0.0
        self.k -= 1


def dual_active_set(prob, settings=None):
    """Goldfarb-Idnani dual active-set method for strictly convex QPs.

    Rows with ``l == u`` are equalities; every finite bound of the other
    rows is an inequality. Returns ``None`` if ``P`` is not positive definite.
    """
    settings = settings or QpSettings()
    orig = prob
    diag = np.diag(prob.P)
    if np.any(diag <= 0):
        return None
    # Jacobi column scaling and unit-norm rows keep J and R well conditioned
    D = 1.0 / np.sqrt(diag)
    AD = prob.A * D
    norms = np.linalg.norm(AD, axis=1)
    E = np.where(norms > 0, 1.0 / np.where(norms > 0, norms, 1.0), 1.0)
    prob = QpProblem(D[:, None] * prob.P * D, D * prob.q, E[:, None] * AD, E * prob.l, E * prob.u)
    n = prob.n
    try:
        L = np.linalg.cholesky(prob.P)
    except np.linalg.LinAlgError:
        return None
    eq_rows = np.flatnonzero(prob.l == prob.u)
    normals, rhs, rows, signs = [], [], [], []
    for i in range(prob.m):
        if prob.l[i] == prob.u[i]:
            continue
        if np.isfinite(prob.l[i]):
            normals.append(prob.A[i])
            rhs.append(prob.l[i])
            rows.append(i)
            signs.append(-1.0)
        if np.isfinite(prob.u[i]):
            normals.append(-prob.A[i])
            rhs.append(-prob.u[i])
            rows.append(i)
            signs.append(1.0)
    N = np.array(normals).T if normals else np.zeros((n, 0))
    b = np.array(rhs)
    rows = np.array(rows, dtype=int)
    signs = np.array(signs)

    fac = _ActiveSet(L)
    z = -fac.J @ (fac.J.T @ prob.q)
    # active entries: (kind, index, orientation); kind 'e' equality, 'i' inequality
    active = []
    duals = np.zeros(0)
    inactive = np.ones(N.shape[1], dtype=bool)
    tol = 1e-3 * settings.eps_prim
    status = QpStatus.SOLVED
    it = 0
    pending_eq = list(eq_rows)
    max_iter = 10 * (prob.m + n) + 100
    while it < max_iter:
        it += 1
        if pending_eq:
            i = pending_eq.pop(0)
            normal = prob.A[i]
            bp = prob.l[i]
            orient = 1.0
            slack = normal @ z - bp
            if slack > 0:
                normal, bp, orient, slack = -normal, -bp, -1.0, -slack
            entry = ("e", i, orient)
            if abs(slack) <= tol * (1.0 + abs(bp)):
                slack = 0.0
        else:
            if not inactive.any():
                break
            s_all = N.T @ z - b
            s_all[~inactive] = np.inf
            p = int(np.argmin(s_all))
            if s_all[p] >= -tol * (1.0 + abs(b[p])):
                break
            normal, bp, slack = N[:, p], b[p], s_all[p]
            entry = ("i", p, 1.0)
        u_p = 0.0
        while True:
            d, zs, r = fac.directions(normal)
            t1, drop_at = np.inf, None
            for j, (kind, _, _) in enumerate(active):
                if kind == "i" and r[j] > 1e-14:
                    ratio = duals[j] / r[j]
                    if ratio < t1:
                        t1, drop_at = ratio, j
            curv = zs @ normal
            t2 = np.inf if curv <= 1e-15 * max(d @ d, 1e-300) else -slack / curv
            if slack == 0.0 and entry[0] == "e":
                t2 = 0.0
            if not np.isfinite(t1) and not np.isfinite(t2):
                status = QpStatus.PRIMAL_INFEASIBLE
                break
            if not np.isfinite(t2):
                duals = duals - t1 * r
                u_p += t1
                _drop(fac, active, inactive, drop_at)
                duals = np.delete(duals, drop_at)
                continue
            t = min(t1, t2)
            z = z + t * zs
            duals = duals - t * r
            u_p += t
            slack = slack + t * curv
            if t == t2:
                fac.add(d)
                active.append(entry)
                duals = np.append(duals, u_p)
                if entry[0] == "i":
                    inactive[entry[1]] = False
                break
            _drop(fac, active, inactive, drop_at)
            duals = np.delete(duals, drop_at)
        if status is QpStatus.PRIMAL_INFEASIBLE:
            break
    else:
        status = QpStatus.MAX_ITER

    y = np.zeros(prob.m)
    for (kind, idx, orient), mult in zip(active, duals):
        if kind == "e":
            y[idx] -= orient * mult
        else:
            y[rows[idx]] += signs[idx] * mult
    z = D * z
    y = E * y
    prob = orig
    prim, dual = residuals(prob, z, y)
    if status is QpStatus.SOLVED and (prim > settings.eps_prim or dual > settings.eps_dual):
        status = QpStatus.MAX_ITER
    return QpSolution(z, y, status, prim, dual, it)


def _drop(fac, active, inactive, j):
    kind, idx, _ = active.pop(j)
    if kind == "i":
        inactive[idx] = True
    fac.drop(j)


def solve_qp(prob, settings=None, warm_start=None):
    """Solve a convex QP.

    Parameters
    ----------
    prob : QpProblem
    settings : QpSettings, optional
    warm_start : tuple of (z, y), optional
        Initial primal and dual iterates. When given, the active set they
        imply is tried first; ADMM only runs if that guess does not verify.

    Returns
    -------
    QpSolution
        ``status`` is never an exception: infeasibility and the iteration
        limit are reported through it.
    """
    settings = settings or QpSettings()
    if warm_start is not None:
        z0 = np.asarray(warm_start[0], dtype=float).reshape(prob.n)
        y0 = np.asarray(warm_start[1], dtype=float).reshape(prob.m)
        if settings.polish:
            lower, upper = _guess_active(prob, z0, y0)
            sol = polish(prob, lower, upper, settings)
            if sol is not None:
                return sol
    else:
        z0 = np.zeros(prob.n)
        y0 = np.zeros(prob.m)

    sol = _Admm(prob, settings).run(z0, y0)
    if settings.polish and sol.status is not QpStatus.PRIMAL_INFEASIBLE:
        lower, upper = _guess_active(prob, sol.z, sol.y)
        polished = polish(prob, lower, upper, settings)
        if polished is not None:
            polished.iterations = sol.iterations
            return polished
    if settings.active_set_fallback and sol.status is QpStatus.MAX_ITER:
        exact = dual_active_set(prob, settings)
        if exact is not None and exact.status is not QpStatus.MAX_ITER:
            exact.iterations += sol.iterations
            return exact
    return sol
