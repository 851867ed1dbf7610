"""Gridding of probe trajectories into sparse cell speeds.

Trajectories live on a 1-D road coordinate. Between two samples a vehicle is
assumed to drive at constant speed, so each segment is cut at every cell
border it crosses and travelled distance/time are accumulated per cell.
Cell speeds of different traces are combined with the harmonic mean.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import ValidationError

V_MIN = 3.0  # km/h
V_MAX = 130.0  # km/h
V_SHIFT = 65.0
V_VAR = 100.0
MS_TO_KMH = 3.6


@dataclass(frozen=True)
class GridSpec:
    """Uniform space-time grid. Times in seconds, positions in meters."""

    t0: float = 0.0
    duration: float = 3600.0
    x0: float = 0.0
    length: float = 10000.0
    dt: float = 60.0
    dx: float = 100.0

    def __post_init__(self):
        if not (self.dt > 0 and self.dx > 0):
            raise ValidationError("dt and dx must be positive")
        if not (self.duration > 0 and self.length > 0):
            raise ValidationError("duration and length must be positive")

    @property
    def n_t(self) -> int:
        return max(1, math.ceil(self.duration / self.dt - 1e-9))

    @property
    def n_x(self) -> int:
        return max(1, math.ceil(self.length / self.dx - 1e-9))

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_t, self.n_x

    def t_centers(self) -> np.ndarray:
        return self.t0 + (np.arange(self.n_t) + 0.5) * self.dt

    def x_centers(self) -> np.ndarray:
        return self.x0 + (np.arange(self.n_x) + 0.5) * self.dx

    @classmethod
    def from_shape(cls, n_t: int, n_x: int, dt: float = 60.0, dx: float = 100.0,
                   t0: float = 0.0, x0: float = 0.0) -> "GridSpec":
        return cls(t0=t0, duration=n_t * dt, x0=x0, length=n_x * dx, dt=dt, dx=dx)


@dataclass
class Trajectory:
    """One probe trace: strictly increasing times, non-decreasing positions."""

    id: str
    t: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.x = np.asarray(self.x, dtype=float)
        if self.t.ndim != 1 or self.t.shape != self.x.shape:
            raise ValidationError(f"trace {self.id}: t and x must be 1-D of equal length")
        if len(self.t) < 2:
            raise ValidationError(f"trace {self.id}: at least two points required")
        if not (np.all(np.isfinite(self.t)) and np.all(np.isfinite(self.x))):
            raise ValidationError(f"trace {self.id}: non-finite sample")
        if np.any(np.diff(self.t) <= 0):
            raise ValidationError(f"trace {self.id}: timestamps must be strictly increasing")
        if np.any(np.diff(self.x) < 0):
            raise ValidationError(f"trace {self.id}: positions must be non-decreasing")

    def __len__(self):
        return len(self.t)


class CellTravel(NamedTuple):
    """Per-cell distance (m) and time (s) travelled by one trace."""

    i: np.ndarray
    j: np.ndarray
    distance: np.ndarray
    time: np.ndarray


class CellSpeeds(NamedTuple):
    i: np.ndarray
    j: np.ndarray
    v: np.ndarray


@dataclass
class SparseSpeedField:
    """Measured cells of a grid, stored as coordinate arrays (km/h)."""

    spec: GridSpec
    i: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    j: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.i = np.asarray(self.i, dtype=np.int64).ravel()
        self.j = np.asarray(self.j, dtype=np.int64).ravel()
        self.v = np.asarray(self.v, dtype=float).ravel()
        if not (len(self.i) == len(self.j) == len(self.v)):
            raise ValidationError("i, j, v must have equal length")
        n_t, n_x = self.spec.shape
        if len(self.i) and (self.i.min() < 0 or self.i.max() >= n_t
                            or self.j.min() < 0 or self.j.max() >= n_x):
            raise ValidationError("cell index outside grid")
        if np.any(~(self.v > 0)):
            raise ValidationError("cell speeds must be positive")
        lin = self.i * n_x + self.j
        if len(np.unique(lin)) != len(lin):
            raise ValidationError("duplicate cell entries")

    def __len__(self):
        return len(self.v)

    def dense(self, fill=np.nan) -> np.ndarray:
        out = np.full(self.spec.shape, fill, dtype=float)
        out[self.i, self.j] = self.v
        return out

    @classmethod
    def from_dense(cls, spec: GridSpec, arr: np.ndarray) -> "SparseSpeedField":
        arr = np.asarray(arr, dtype=float)
        if arr.shape != spec.shape:
            raise ValidationError(f"matrix shape {arr.shape} != grid shape {spec.shape}")
        ii, jj = np.nonzero(np.isfinite(arr))
        return cls(spec, ii, jj, arr[ii, jj])


@dataclass
class SpeedField:
    """Full n_T x n_X speed matrix in km/h."""

    spec: GridSpec
    v: np.ndarray

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)
        if self.v.shape != self.spec.shape:
            raise ValidationError(f"matrix shape {self.v.shape} != grid shape {self.spec.shape}")


@dataclass
class OccupancyMatrix:
    spec: GridSpec
    psi: np.ndarray


def _domain_bounds(spec: GridSpec):
    return spec.t0, spec.t0 + spec.duration, spec.x0, spec.x0 + spec.length


def _border_cuts(a, b, origin, step, seg_len, base, valid):
    """Parameters s at which segments cross grid borders ``origin + m*step``."""
    m0 = np.floor((a - origin) / step).astype(np.int64) + 1
    m1 = np.ceil((b - origin) / step).astype(np.int64) - 1
    count = np.where(valid, np.maximum(m1 - m0 + 1, 0), 0)
    seg = np.repeat(np.arange(len(a)), count)
    if len(seg) == 0:
        return seg, np.zeros(0)
    offset = np.arange(len(seg)) - np.repeat(np.cumsum(count) - count, count)
    border = origin + (m0[seg] + offset) * step
    return seg, (border - base[seg]) / seg_len[seg]


def rasterize_trajectory(traj: Trajectory, spec: GridSpec) -> CellTravel:
    """Split a trace at every cell border and accumulate travel per cell.

    Cells are half-open, so a border point belongs to the cell it enters.
    Only the part of the trace inside the domain is kept; cells with zero
    travel time are dropped.
    """
    t_lo, t_hi, x_lo, x_hi = _domain_bounds(spec)
    n_t, n_x = spec.shape
    ta, tb = traj.t[:-1], traj.t[1:]
    xa, xb = traj.x[:-1], traj.x[1:]
    seg_t, seg_x = tb - ta, xb - xa
    moving = seg_x > 0
    safe_x = np.where(moving, seg_x, 1.0)

    # parametric clipping to the domain, s in [0, 1]
    s_lo = np.maximum(0.0, (t_lo - ta) / seg_t)
    s_hi = np.minimum(1.0, (t_hi - ta) / seg_t)
    s_lo = np.where(moving, np.maximum(s_lo, (x_lo - xa) / safe_x), s_lo)
    s_hi = np.where(moving, np.minimum(s_hi, (x_hi - xa) / safe_x), s_hi)
    valid = (s_hi > s_lo) & (moving | ((xa >= x_lo) & (xa < x_hi)))

    k = np.arange(len(ta))
    seg_tc, s_tc = _border_cuts(ta + s_lo * seg_t, ta + s_hi * seg_t, spec.t0, spec.dt,
                                seg_t, ta, valid)
    seg_xc, s_xc = _border_cuts(xa + s_lo * seg_x, xa + s_hi * seg_x, spec.x0, spec.dx,
                                safe_x, xa, valid & moving)
    seg = np.concatenate([k[valid], k[valid], seg_tc, seg_xc])
    s = np.concatenate([s_lo[valid], s_hi[valid], s_tc, s_xc])
    s = np.clip(s, s_lo[seg], s_hi[seg])
    order = np.lexsort((s, seg))
    seg, s = seg[order], s[order]

    same = seg[1:] == seg[:-1]
    ds = np.where(same, s[1:] - s[:-1], 0.0)
    keep = ds > 0
    sk, ds = seg[:-1][keep], ds[keep]
    mid = s[:-1][keep] + 0.5 * ds
    ci = np.clip(np.floor((ta[sk] + mid * seg_t[sk] - spec.t0) / spec.dt).astype(np.int64), 0, n_t - 1)
    cj = np.clip(np.floor((xa[sk] + mid * seg_x[sk] - spec.x0) / spec.dx).astype(np.int64), 0, n_x - 1)

    lin = ci * n_x + cj
    cells, inverse = np.unique(lin, return_inverse=True)
    dist = np.bincount(inverse, weights=ds * seg_x[sk], minlength=len(cells))
    time = np.bincount(inverse, weights=ds * seg_t[sk], minlength=len(cells))
    pos = time > 0
    cells = cells[pos]
    return CellTravel(cells // n_x, cells % n_x, dist[pos], time[pos])


def cell_speeds(travel: CellTravel, v_min: float = V_MIN, v_max: float = V_MAX) -> CellSpeeds:
    """Per-cell speed of one trace in km/h, bounded to [v_min, v_max].

    A stopped vehicle (zero distance) yields v_min rather than 0.
    """
    v = MS_TO_KMH * travel.distance / travel.time
    return CellSpeeds(travel.i, travel.j, np.clip(v, v_min, v_max))


def grid_traces(trajs: Iterable[Trajectory], spec: GridSpec) -> list[CellSpeeds]:
    """Rasterize every trace; traces that never enter the domain give empty records."""
    return [cell_speeds(rasterize_trajectory(tr, spec)) for tr in trajs]


def aggregate(records: Iterable, spec: GridSpec) -> SparseSpeedField:
    """Harmonic mean over all per-trace contributions to each cell.

    ``records`` is an iterable of ``(i, j, v)`` triples; each element may be a
    scalar or an array (e.g. a :class:`CellSpeeds` of one trace).
    """
    parts_i, parts_j, parts_v = [], [], []
    for rec in records:
        ri, rj, rv = rec
        parts_i.append(np.atleast_1d(np.asarray(ri, dtype=np.int64)))
        parts_j.append(np.atleast_1d(np.asarray(rj, dtype=np.int64)))
        parts_v.append(np.atleast_1d(np.asarray(rv, dtype=float)))
    if not parts_v:
        return SparseSpeedField(spec)
    i = np.concatenate(parts_i)
    j = np.concatenate(parts_j)
    v = np.concatenate(parts_v)
    return aggregate_arrays(i, j, v, spec)


def aggregate_arrays(i: np.ndarray, j: np.ndarray, v: np.ndarray, spec: GridSpec) -> SparseSpeedField:
    if len(v) == 0:
        return SparseSpeedField(spec)
    if np.any(~(v > 0)):
        raise ValidationError("contributing speeds must be positive")
    n_t, n_x = spec.shape
    if i.min() < 0 or i.max() >= n_t or j.min() < 0 or j.max() >= n_x:
        raise ValidationError("cell index outside grid")
    lin = i * n_x + j
    cells, inverse = np.unique(lin, return_inverse=True)
    inv_sum = np.bincount(inverse, weights=1.0 / v)
    count = np.bincount(inverse)
    return SparseSpeedField(spec, cells // n_x, cells % n_x, count / inv_sum)


def normalize(v):
    """Map km/h to network units: (clip(v, 3, 130) - 65) / 100."""
    return (np.clip(v, V_MIN, V_MAX) - V_SHIFT) / V_VAR


def denormalize(z):
    return np.asarray(z) * V_VAR + V_SHIFT


def occupancy(field: SparseSpeedField) -> OccupancyMatrix:
    psi = np.zeros(field.spec.shape, dtype=np.uint8)
    psi[field.i, field.j] = 1
    return OccupancyMatrix(field.spec, psi)


def network_input(field: SparseSpeedField) -> tuple[np.ndarray, np.ndarray]:
    """Normalized speed matrix (0 where empty) and the matching occupancy matrix."""
    speeds = np.zeros(field.spec.shape, dtype=np.float32)
    speeds[field.i, field.j] = normalize(field.v)
    return speeds, occupancy(field).psi.astype(np.float32)


def split_count(n: int, p: float) -> int:
    """Number of traces in the reconstruction split for ratio ``p``; both sides non-empty."""
    if n < 2:
        raise ValidationError(f"need at least 2 traces to split, got {n}")
    return int(min(max(round(p * n), 1), n - 1))


class TraceSet:
    """Gridded per-trace cell speeds of one scenario, stored flat for fast subsetting."""

    def __init__(self, spec: GridSpec, records: list[CellSpeeds], name: str = ""):
        self.spec = spec
        self.name = name
        self.n = len(records)
        lens = [len(r.v) for r in records]
        self.trace = np.repeat(np.arange(self.n), lens)
        cat = (lambda k, dt: np.concatenate([np.asarray(r[k], dtype=dt) for r in records])
               if records else np.zeros(0, dtype=dt))
        self.i = cat(0, np.int64)
        self.j = cat(1, np.int64)
        self.v = cat(2, float)

    @classmethod
    def from_trajectories(cls, trajs: Iterable[Trajectory], spec: GridSpec, name: str = ""):
        return cls(spec, grid_traces(trajs, spec), name)

    def split(self, p: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Random trace-level split: (reconstruction indices, held-out indices)."""
        k = split_count(self.n, p)
        perm = rng.permutation(self.n)
        return np.sort(perm[:k]), np.sort(perm[k:])

    def _select(self, traces) -> np.ndarray:
        keep = np.zeros(self.n, dtype=bool)
        keep[np.asarray(traces, dtype=np.int64)] = True
        return keep[self.trace]

    def field(self, traces=None) -> SparseSpeedField:
        """Harmonic-mean field of the given traces (all traces if None)."""
        if traces is None:
            return aggregate_arrays(self.i, self.j, self.v, self.spec)
        m = self._select(traces)
        return aggregate_arrays(self.i[m], self.j[m], self.v[m], self.spec)

    def window(self, traces, i0: int, j0: int, h: int, w: int) -> np.ndarray:
        """Dense harmonic-mean speeds of ``traces`` on an h x w window, NaN where empty.

        The window may reach outside the grid; such cells stay empty.
        """
        m = self._select(traces)
        m &= (self.i >= i0) & (self.i < i0 + h) & (self.j >= j0) & (self.j < j0 + w)
        lin = (self.i[m] - i0) * w + (self.j[m] - j0)
        inv = np.bincount(lin, weights=1.0 / self.v[m], minlength=h * w)
        cnt = np.bincount(lin, minlength=h * w)
        out = np.full(h * w, np.nan)
        hit = cnt > 0
        out[hit] = cnt[hit] / inv[hit]
        return out.reshape(h, w)


# --------------------------------------------------------------------------- IO

FIELD_MAGIC = b"TSF1"


def read_trajectories_csv(path) -> list[Trajectory]:
    rows: dict[str, tuple[list, list]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"trace_id", "t_s", "x_m"} - set(reader.fieldnames or [])
        if missing:
            raise ValidationError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            ts, xs = rows.setdefault(row["trace_id"], ([], []))
            ts.append(float(row["t_s"]))
            xs.append(float(row["x_m"]))
    return [Trajectory(tid, np.array(ts), np.array(xs)) for tid, (ts, xs) in rows.items()]


def write_trajectories_csv(path, trajs: Iterable[Trajectory]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trace_id", "t_s", "x_m"])
        for tr in trajs:
            for t, x in zip(tr.t, tr.x):
                w.writerow([tr.id, f"{t:.3f}", f"{x:.3f}"])


def write_sparse_csv(path, field: SparseSpeedField):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "v_kmh"])
        for a, b, v in zip(field.i, field.j, field.v):
            w.writerow([int(a), int(b), f"{v:.6f}"])


def read_sparse_csv(path, spec: GridSpec) -> SparseSpeedField:
    data = np.genfromtxt(path, delimiter=",", names=True, ndmin=1)
    if data.size == 0:
        return SparseSpeedField(spec)
    return SparseSpeedField(spec, data["i"].astype(np.int64), data["j"].astype(np.int64), data["v_kmh"])


def write_field(path, fld: SpeedField):
    """Write a full field, binary (``TSF1`` header) or CSV depending on suffix."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        np.savetxt(path, fld.v, delimiter=",", fmt="%.4f")
        return
    n_t, n_x = fld.v.shape
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC + struct.pack("<III", n_t, n_x, 0))
        fh.write(np.ascontiguousarray(fld.v, dtype="<f4").tobytes())


def read_field(path, spec: GridSpec | None = None) -> SpeedField:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        arr = np.loadtxt(path, delimiter=",", ndmin=2)
    else:
        raw = path.read_bytes()
        if len(raw) < 16 or raw[:4] != FIELD_MAGIC:
            raise ValidationError(f"{path}: not a TSF1 field file")
        n_t, n_x, _ = struct.unpack("<III", raw[4:16])
        body = raw[16:]
        if len(body) != 4 * n_t * n_x:
            raise ValidationError(f"{path}: truncated field body")
        arr = np.frombuffer(body, dtype="<f4").reshape(n_t, n_x).astype(float)
    if spec is None:
        spec = GridSpec.from_shape(*arr.shape)
    return SpeedField(spec, arr)
