"""Independent reference computations used to freeze expected values."""

import itertools

import numpy as np


def _solve_kkt(K, b):
    """Least-squares solve of a symmetric KKT system after equilibration."""
    d = np.max(np.abs(K), axis=1)
    d = 1.0 / np.sqrt(np.where(d > 0, d, 1.0))
    y = np.linalg.lstsq(d[:, None] * K * d, d * b, rcond=None)[0]
    return d * y


def enumerate_qp(P, q, A, l, u, tol=1e-9):
    """Brute-force convex QP minimum by active-set enumeration.

    Every row with ``l < u`` is tried as inactive, at its lower bound or at
    its upper bound; rows with ``l == u`` are always active. Each pattern is
    an equality-constrained QP solved through its KKT system in the least
    squares sense; the feasible pattern with the smallest objective wins.
    """
    P = np.asarray(P, float)
    q = np.asarray(q, float)
    A = np.asarray(A, float)
    n = q.size
    eq = np.flatnonzero(l == u)
    box = np.flatnonzero(l < u)
    best_z, best_f = None, np.inf
    for pattern in itertools.product((0, -1, 1), repeat=box.size):
        rows = list(eq)
        rhs = list(l[eq])
        for i, s in zip(box, pattern):
            if s == -1:
                rows.append(i)
                rhs.append(l[i])
            elif s == 1:
                rows.append(i)
                rhs.append(u[i])
        Aa = A[rows] if rows else np.zeros((0, n))
        k = Aa.shape[0]
        K = np.block([[P, Aa.T], [Aa, np.zeros((k, k))]])
        sol = _solve_kkt(K, np.concatenate([-q, rhs]))
        z = sol[:n]
        b = np.concatenate([-q, rhs])
        # consistency relative to the magnitudes in the system
        slack = 1e-8 * (1.0 + np.max(np.abs(K)) * np.max(np.abs(sol), initial=0.0) + np.max(np.abs(b)))
        if np.max(np.abs(K @ sol - b)) > slack:
            continue
        Az = A @ z
        if np.all(Az >= l - tol * (1 + np.abs(l))) and np.all(Az <= u + tol * (1 + np.abs(u))):
            f = 0.5 * z @ P @ z + q @ z
            if f < best_f:
                best_f, best_z = f, z
    return best_z, best_f


def kalman_filter(F, Qn, H, R, m0, P0, measurements):
    """Closed-form linear Kalman filter; returns per-step posterior (m, P)."""
    m, P = np.array(m0, float), np.array(P0, float)
    out = []
    for k, z in enumerate(measurements):
        if k > 0:
            m = F @ m
            P = F @ P @ F.T + Qn
        S = H @ P @ H.T + R
        K = P @ H.T @ np.linalg.inv(S)
        m = m + K @ (z - H @ m)
        P = P - K @ S @ K.T
        out.append((m.copy(), P.copy()))
    return out


def central_difference(f, x, h):
    x = np.asarray(x, float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def kkt_certificate(P, q, A, l, u, lower, upper, tol=1e-9):
    """Solve the QP restricted to a claimed active set and certify it.

    Rows in ``lower``/``upper`` (boolean masks) are held at ``l``/``u``; the
    equality-constrained problem is solved through its KKT system. Returns
    ``z`` if it is feasible and every multiplier has the sign its bound
    allows (the global optimum for strictly convex ``P``), else ``None``.
    """
    P = np.asarray(P, float)
    A = np.asarray(A, float)
    n = P.shape[0]
    rows = np.flatnonzero(lower | upper)
    rhs = np.where(lower, l, u)[rows]
    Aa = A[rows]
    k = rows.size
    K = np.block([[P, Aa.T], [Aa, np.zeros((k, k))]])
    sol = _solve_kkt(K, np.concatenate([-np.asarray(q, float), rhs]))
    z, lam = sol[:n], sol[n:]
    Az = A @ z
    scale = 1.0 + np.max(np.abs(lam), initial=0.0)
    if np.any(Az < l - tol * (1 + np.abs(l))) or np.any(Az > u + tol * (1 + np.abs(u))):
        return None
    eq = (l == u)[rows]
    # stationarity P z + q + Aa' lam = 0: lower-bound multipliers <= 0, upper >= 0
    lo_rows = lower[rows] & ~eq
    up_rows = upper[rows] & ~eq
    if np.any(lam[lo_rows] > tol * scale) or np.any(lam[up_rows] < -tol * scale):
        return None
    return z
