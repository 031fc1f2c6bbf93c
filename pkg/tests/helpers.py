"""Shared generators for the test suites."""

import numpy as np

from demotune.qp import QpProblem
from demotune.tuners.ukf import MerweSigmaPoints, UnscentedKalmanFilter
from oracles import kalman_filter


def random_qp(rng, n=None, m_box=None, m_eq=None):
    """Strictly convex QP with two-sided rows and optional equality rows."""
    n = n or int(rng.integers(2, 9))
    m_box = int(rng.integers(1, 6)) if m_box is None else m_box
    m_eq = int(rng.integers(0, min(2, n - 1) + 1)) if m_eq is None else m_eq
    M = rng.normal(size=(n, n))
    P = M @ M.T + 0.1 * np.eye(n)
    q = rng.normal(size=n) * 3
    A = rng.normal(size=(m_box + m_eq, n))
    center = A @ rng.normal(size=n) * 0.3
    width = rng.uniform(0.1, 1.0, size=m_box + m_eq)
    l = center - width
    u = center + width
    l[m_box:] = u[m_box:] = center[m_box:]
    return QpProblem(P, q, A, l, u)


def run_linear_case(rng, n, steps=100):
    """Largest gap between the unscented and the exact filter on a random linear trace."""
    F = np.eye(n) + 0.1 * rng.normal(size=(n, n))
    F /= max(1.0, np.max(np.abs(np.linalg.eigvals(F))))
    Lq = rng.normal(size=(n, n)) * 0.1
    Qn = Lq @ Lq.T + 1e-3 * np.eye(n)
    m_obs = int(rng.integers(1, n + 1))
    H = rng.normal(size=(m_obs, n))
    R = np.diag(rng.uniform(0.05, 0.5, size=m_obs))
    m0 = rng.normal(size=n)
    P0 = np.diag(rng.uniform(0.5, 2.0, size=n))
    x = m0.copy()
    zs = []
    for k in range(steps):
        if k:
            x = F @ x + rng.multivariate_normal(np.zeros(n), Qn)
        zs.append(H @ x + rng.multivariate_normal(np.zeros(m_obs), R))
    ref = kalman_filter(F, Qn, H, R, m0, P0, zs)
    ukf = UnscentedKalmanFilter(lambda p: p @ F.T, lambda p: p @ H.T, Qn, R, MerweSigmaPoints(n))
    ukf.x, ukf.P = m0.copy(), P0.copy()
    err = 0.0
    for k, z in enumerate(zs):
        if k:
            ukf.predict()
        ukf.update(z)
        m_ref, P_ref = ref[k]
        err = max(err, np.max(np.abs(ukf.x - m_ref)), np.max(np.abs(ukf.P - P_ref)))
    return err
