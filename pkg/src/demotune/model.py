"""Discrete lateral kinematics relative to a reference curve.

The state is ``x = [d, theta, kappa, kappa_dot]``: signed lateral offset,
heading, path curvature and curvature rate. The input is the curvature
acceleration and the reference heading enters as a disturbance on ``d``.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from demotune.errors import InvalidConfigError, OutOfRangeError

NX = 4
NU = 1
NY = 3
NP = 5

#: Output map ``x_d = C @ y_d``; curvature rate is not measured.
C = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, 0.0],
    ]
)

#: Measurement selector of (d, theta, kappa) out of the state.
H_MEAS = C.T.copy()


class VehicleState(NamedTuple):
    d: float
    theta: float
    kappa: float
    kappa_dot: float


class ModelMatrices(NamedTuple):
    A: np.ndarray
    B: np.ndarray
    Bz: np.ndarray


def _vec(values, n, name):
    arr = np.array(values, dtype=float).reshape(-1)
    if arr.shape != (n,):
        raise InvalidConfigError(f"{name} must have {n} entries, got {arr.size}")
    return arr


@dataclass(frozen=True)
class Bounds:
    """Box bounds on states, input and tunable weights.

    Defaults are the lane-keeping values used for the lateral planner.
    """

    x_min: np.ndarray = field(default_factory=lambda: np.array([-2.0, -1000.0, -0.04, -0.15]))
    x_max: np.ndarray = field(default_factory=lambda: np.array([2.0, 1000.0, 0.04, 0.15]))
    u_min: float = -0.07
    u_max: float = 0.07
    p_min: np.ndarray = field(default_factory=lambda: np.full(NP, 1e-6))
    p_max: np.ndarray = field(default_factory=lambda: np.array([1e5, 1e5, 1e5, 1e5, 1e-3]))

    def __post_init__(self):
        object.__setattr__(self, "x_min", _vec(self.x_min, NX, "x_min"))
        object.__setattr__(self, "x_max", _vec(self.x_max, NX, "x_max"))
        object.__setattr__(self, "p_min", _vec(self.p_min, NP, "p_min"))
        object.__setattr__(self, "p_max", _vec(self.p_max, NP, "p_max"))
        object.__setattr__(self, "u_min", float(self.u_min))
        object.__setattr__(self, "u_max", float(self.u_max))
        pairs = [
            ("x", self.x_min, self.x_max),
            ("u", np.array([self.u_min]), np.array([self.u_max])),
            ("p", self.p_min, self.p_max),
        ]
        for name, lo, hi in pairs:
            if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
                raise InvalidConfigError(f"{name} bounds must be finite")
            if np.any(lo >= hi):
                raise InvalidConfigError(f"{name}_min must be strictly below {name}_max")

    def to_dict(self):
        return {
            "x_min": self.x_min.tolist(),
            "x_max": self.x_max.tolist(),
            "u_min": self.u_min,
            "u_max": self.u_max,
            "p_min": self.p_min.tolist(),
            "p_max": self.p_max.tolist(),
        }


def _check_ts(Ts):
    if not np.isfinite(Ts) or Ts <= 0:
        raise InvalidConfigError(f"sample time must be finite and positive, got {Ts!r}")


def system_matrices(v, Ts):
    """Return ``(A, B, Bz)`` of the discrete lateral model at speed ``v``.

    Parameters
    ----------
    v : float
        Vehicle speed [m/s], ``v >= 0``.
    Ts : float
        Sample time [s].
    """
    _check_ts(Ts)
    if not np.isfinite(v) or v < 0:
        raise InvalidConfigError(f"speed must be finite and non-negative, got {v!r}")
    v = float(v)
    Ts = float(Ts)
    A = np.array(
        [
            [1.0, v * Ts, 0.5 * v**2 * Ts**2, v**2 * Ts**3 / 6.0],
            [0.0, 1.0, v * Ts, 0.5 * v * Ts**2],
            [0.0, 0.0, 1.0, Ts],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    B = np.array([v**2 * Ts**4 / 24.0, v * Ts**3 / 6.0, 0.5 * Ts**2, Ts])
    Bz = np.array([-v * Ts, 0.0, 0.0, 0.0])
    return ModelMatrices(A, B, Bz)


def step(x, u, v, theta_r, Ts):
    """Advance the model one sample: ``A x + B u + Bz theta_r`` (no clamping)."""
    A, B, Bz = system_matrices(v, Ts)
    x = np.asarray(x, dtype=float)
    return A @ x + B * float(u) + Bz * float(theta_r)


def observability_rank(v, Ts, C=C):
    """Rank of the observability matrix of ``(A(v, Ts), C^T)``.

    ``C`` maps measurements into state space (4x3); its transpose is the
    measurement map used here.
    """
    if not np.isfinite(v) or v <= 0:
        raise InvalidConfigError(f"observability needs v > 0, got {v!r}")
    A = system_matrices(v, Ts).A
    H = np.asarray(C, dtype=float).T
    blocks = [H]
    for _ in range(NX - 1):
        blocks.append(blocks[-1] @ A)
    return int(np.linalg.matrix_rank(np.vstack(blocks)))


def _interior(value, lo, hi):
    return np.clip(value, np.nextafter(lo, hi), np.nextafter(hi, lo))


def from_unbounded(tilde, lo, hi):
    """Map an unbounded value into ``(lo, hi)`` via a scaled ``tanh``.

    Equal to ``(hi - lo)/2 * tanh(tilde) + (lo + hi)/2``; evaluated relative
    to the nearer bound so that saturated values keep their distance to it.
    The result is strictly inside ``(lo, hi)`` for every finite ``tilde``.
    Works elementwise on arrays.
    """
    tilde = np.asarray(tilde, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo >= hi):
        raise InvalidConfigError("lower bound must be strictly below upper bound")
    width = hi - lo
    # e/(1+e) with e = exp(-2|tilde|) is the fraction of the width to the near bound
    e = np.exp(-2.0 * np.minimum(np.abs(tilde), 400.0))
    frac = e / (1.0 + e)
    value = np.where(tilde >= 0, hi - width * frac, lo + width * frac)
    value = _interior(value, lo, hi)
    return float(value) if value.ndim == 0 else value


def to_unbounded(value, lo, hi):
    """Inverse of :func:`from_unbounded`; ``value`` must lie strictly inside."""
    value = np.asarray(value, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo >= hi):
        raise InvalidConfigError("lower bound must be strictly below upper bound")
    if np.any(~np.isfinite(value)) or np.any(value <= lo) or np.any(value >= hi):
        raise OutOfRangeError(f"value {value!r} not strictly inside ({lo!r}, {hi!r})")
    tilde = 0.5 * np.log((value - lo) / (hi - value))
    return float(tilde) if tilde.ndim == 0 else tilde
