"""Demonstration traces: CSV I/O, resampling and a synthetic scenario generator."""

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from demotune.errors import InvalidConfigError, InvalidInputError, ParseError

COLUMNS = ("t", "d_d", "theta_d", "kappa_d", "theta_r", "kappa_r", "kappa_dot_r", "v")
GRID_TOL = 1e-9

#: Square roots of the measurement-noise variances on (d, theta, kappa).
DEFAULT_NOISE_STD = (math.sqrt(0.0052), math.sqrt(0.0052), math.sqrt(0.0039), 0.0)


@dataclass
class Demonstration:
    """Time-gridded demonstration, stored column-wise.

    ``d_d, theta_d, kappa_d`` are the measured lateral state; ``theta_r,
    kappa_r, kappa_dot_r`` describe the reference curve and ``v`` the speed.
    """

    t: np.ndarray
    d_d: np.ndarray
    theta_d: np.ndarray
    kappa_d: np.ndarray
    theta_r: np.ndarray
    kappa_r: np.ndarray
    kappa_dot_r: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        for name in COLUMNS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        n = self.t.size
        if n < 1:
            raise InvalidInputError("demonstration is empty")
        for name in COLUMNS:
            col = getattr(self, name)
            if col.size != n:
                raise InvalidInputError(f"column {name} has {col.size} samples, expected {n}")
            bad = np.flatnonzero(~np.isfinite(col))
            if bad.size:
                raise InvalidInputError(f"non-finite {name} at sample {bad[0]}")
        if np.any(self.v <= 0):
            raise InvalidInputError("speed must be positive everywhere")
        if n > 1:
            dt = np.diff(self.t)
            if dt[0] <= 0 or np.max(np.abs(dt - dt[0])) > GRID_TOL:
                raise InvalidInputError("time grid is not uniform")

    def __len__(self):
        return self.t.size

    @property
    def ts_grid(self):
        return float(self.t[1] - self.t[0]) if len(self) > 1 else float("nan")

    @property
    def y_d(self):
        """``(T+1, 3)`` measured output ``[d_d, theta_d, kappa_d]``."""
        return np.column_stack([self.d_d, self.theta_d, self.kappa_d])

    def columns(self):
        return {name: getattr(self, name) for name in COLUMNS}


def derive_kappa_dot_r(demo):
    """Forward difference of ``kappa_r``; the last sample repeats its predecessor."""
    if len(demo) < 2:
        raise InvalidInputError("need at least two samples to differentiate kappa_r")
    kd = np.empty(len(demo))
    kd[:-1] = np.diff(demo.kappa_r) / demo.ts_grid
    kd[-1] = kd[-2]
    return replace(demo, kappa_dot_r=kd)


def resample(demo, Ts):
    """Linearly interpolate every channel onto a uniform ``Ts`` grid.

    The new grid starts at the first sample and stops at the last time the
    original trace fully covers. Only downsampling is allowed.
    """
    if not np.isfinite(Ts) or Ts <= 0:
        raise InvalidConfigError(f"Ts must be positive, got {Ts!r}")
    if len(demo) < 2:
        raise InvalidInputError("cannot resample a single-sample trace")
    native = demo.ts_grid
    if Ts < native - GRID_TOL:
        raise InvalidConfigError(f"Ts={Ts} is finer than the native period {native}")
    t0 = demo.t[0]
    span = demo.t[-1] - t0
    count = int(math.floor(span / Ts + GRID_TOL)) + 1
    t_new = t0 + Ts * np.arange(count)
    cols = {name: np.interp(t_new, demo.t, getattr(demo, name)) for name in COLUMNS[1:]}
    return Demonstration(t=t_new, **cols)


def save_demo(demo, path):
    """Write ``demo`` as CSV with full float precision."""
    path = Path(path)
    cols = [getattr(demo, name) for name in COLUMNS]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in zip(*cols):
            writer.writerow([repr(float(x)) for x in row])


def load_demo(path):
    """Read a demonstration CSV.

    ``kappa_dot_r`` may be empty on every row, in which case it is derived
    from ``kappa_r``. Errors name the 1-based data row (header excluded).
    """
    path = Path(path)
    with path.open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("file is empty") from None
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise ParseError(f"missing column(s): {', '.join(missing)}", row=0)
        index = {c: header.index(c) for c in COLUMNS}
        data = {c: [] for c in COLUMNS}
        kd_present = []
        for rownum, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", row=rownum)
            for c in COLUMNS:
                cell = row[index[c]].strip()
                if c == "kappa_dot_r" and cell == "":
                    kd_present.append(False)
                    data[c].append(0.0)
                    continue
                try:
                    value = float(cell)
                except ValueError:
                    raise ParseError(f"cannot parse {c}={cell!r}", row=rownum) from None
                if not math.isfinite(value):
                    raise ParseError(f"non-finite {c}", row=rownum)
                if c == "v" and value <= 0:
                    raise ParseError("speed must be positive", row=rownum)
                if c == "kappa_dot_r":
                    kd_present.append(True)
                data[c].append(value)
    if not data["t"]:
        raise ParseError("no data rows")
    t = np.array(data["t"])
    if t.size > 1:
        dt = np.diff(t)
        off = np.flatnonzero((dt <= 0) | (np.abs(dt - dt[0]) > GRID_TOL))
        if off.size:
            raise ParseError("time grid is not uniform", row=int(off[0]) + 2)
    if any(kd_present) and not all(kd_present):
        raise ParseError("kappa_dot_r must be given on all rows or none")
    demo = Demonstration(**{c: np.array(v) for c, v in data.items()})
    if not any(kd_present):
        demo = derive_kappa_dot_r(demo)
    return demo


@dataclass(frozen=True)
class Segment:
    duration: float
    kappa_r: float
    v_start: float
    v_end: float


def default_segments():
    return (
        Segment(10.0, 0.0, 25.0, 25.0),
        Segment(10.0, -0.005, 25.0, 16.7),
        Segment(15.0, 0.012, 16.7, 16.7),
    )


@dataclass(frozen=True)
class ScenarioSpec:
    """Piecewise-constant-curvature road with piecewise-linear speed.

    The default drives straight at 90 km/h, brakes to 60 km/h through a
    right curve and then takes a tighter left curve.
    """

    segments: tuple = field(default_factory=default_segments)
    noise_std: tuple = DEFAULT_NOISE_STD
    seed: int = 0

    def __post_init__(self):
        segs = tuple(s if isinstance(s, Segment) else Segment(**s) for s in self.segments)
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "noise_std", tuple(float(s) for s in self.noise_std))
        if not segs:
            raise InvalidConfigError("scenario needs at least one segment")
        if len(self.noise_std) != 4 or any(not (s >= 0) for s in self.noise_std):
            raise InvalidConfigError("noise_std must be 4 non-negative values")
        for i, s in enumerate(segs):
            if not (s.duration > 0):
                raise InvalidConfigError(f"segment {i}: duration must be positive")
            if not (s.v_start > 0 and s.v_end > 0):
                raise InvalidConfigError(f"segment {i}: speeds must be positive")

    @property
    def duration(self):
        return sum(s.duration for s in self.segments)

    def to_dict(self):
        return {
            "segments": [vars(s).copy() for s in self.segments],
            "noise_std": list(self.noise_std),
            "seed": self.seed,
        }


def reference_channels(spec, Ts):
    """Sample ``kappa_r`` and ``v`` on the ``Ts`` grid and integrate ``theta_r``."""
    count = int(math.floor(spec.duration / Ts + GRID_TOL)) + 1
    t = Ts * np.arange(count)
    ends = np.cumsum([s.duration for s in spec.segments])
    kappa = np.empty(count)
    v = np.empty(count)
    for k, tk in enumerate(t):
        i = min(int(np.searchsorted(ends, tk, side="right")), len(spec.segments) - 1)
        seg = spec.segments[i]
        start = ends[i] - seg.duration
        frac = min(max((tk - start) / seg.duration, 0.0), 1.0)
        kappa[k] = seg.kappa_r
        v[k] = seg.v_start + (seg.v_end - seg.v_start) * frac
    theta = np.zeros(count)
    for k in range(count - 1):
        theta[k + 1] = theta[k] + v[k] * Ts * kappa[k]
    return t, theta, kappa, v


def generate_demo(spec, params_true, cfg):
    """Synthesize a demonstration by closed-loop simulation with ``params_true``.

    The vehicle starts on the reference. Measurements are the simulated
    ``(d, theta, kappa)`` plus seeded Gaussian noise; the reference channels
    stay noise-free.
    """
    from demotune.simloop import simulate

    kmax = cfg.bounds.x_max[2]
    kmin = cfg.bounds.x_min[2]
    for i, s in enumerate(spec.segments):
        if not (kmin <= s.kappa_r <= kmax):
            raise InvalidConfigError(
                f"segment {i}: kappa_r={s.kappa_r} outside curvature bounds [{kmin}, {kmax}]"
            )
    if not params_true.within(cfg.bounds):
        raise InvalidConfigError("true parameters outside the weight bounds")
    t, theta_r, kappa_r, v = reference_channels(spec, cfg.Ts)
    if t.size < 2:
        raise InvalidConfigError("scenario shorter than one sample period")
    zeros = np.zeros_like(t)
    ref = derive_kappa_dot_r(Demonstration(t, zeros, zeros, zeros, theta_r, kappa_r, zeros, v))
    x0 = np.array([0.0, theta_r[0], kappa_r[0], 0.0])
    sim = simulate(ref, params_true, cfg, x0=x0)
    rng = np.random.default_rng(spec.seed)
    noise = rng.normal(size=(t.size, 3)) * np.array(spec.noise_std[:3])
    meas = sim.states[:, :3] + noise
    return replace(ref, d_d=meas[:, 0], theta_d=meas[:, 1], kappa_d=meas[:, 2])
