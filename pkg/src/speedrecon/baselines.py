"""Classical kernel-smoothing estimators: isotropic, ASM and a phase-based variant.

All smoothers evaluate a normalized kernel sum over the measured cells at
cell centers. Kernels are truncated at five decay lengths and applied by FFT
convolution; cells that no datum reaches within the truncated support fall
back to the exact, untruncated kernel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import ndimage, signal
from scipy.spatial import Delaunay, QhullError

from .errors import ValidationError
from .grid import MS_TO_KMH, V_MAX, V_MIN, GridSpec, SparseSpeedField, SpeedField

TRUNCATE = 5.0
# below this summed weight a cell counts as unreached; the smallest in-support
# weight is exp(-2 * TRUNCATE) ~ 4.5e-5
_MIN_WEIGHT = 1e-9


@dataclass(frozen=True)
class IsoParams:
    tau: float = 150.0  # s
    sigma: float = 300.0  # m

    def __post_init__(self):
        if self.tau <= 0 or self.sigma <= 0:
            raise ValidationError("tau and sigma must be positive")


@dataclass(frozen=True)
class AsmParams:
    c_cong: float = -15.0  # km/h
    c_free: float = 80.0  # km/h
    sigma: float = 300.0  # m
    tau: float = 150.0  # s
    v_thres: float = 60.0  # km/h
    dv: float = 20.0  # km/h

    def __post_init__(self):
        if not (self.c_cong < 0 < self.c_free):
            raise ValidationError("need c_cong < 0 < c_free")
        if self.sigma <= 0 or self.tau <= 0 or self.dv <= 0:
            raise ValidationError("sigma, tau and dv must be positive")


@dataclass(frozen=True)
class PsmParams:
    v_c: float = 60.0  # km/h, congestion threshold
    dilate_t: float = 300.0  # s
    dilate_x: float = 400.0  # m
    free_sigma: float = 300.0
    free_tau: float = 150.0
    c_free: float = 80.0
    sync_sigma: float = 200.0
    sync_tau: float = 600.0
    jam_sigma: float = 300.0
    jam_tau: float = 150.0
    c_cong: float = -15.0
    jam_ratio: float = 1.3  # wave-aligned / stationary congested share needed for JAM

    def __post_init__(self):
        if self.jam_ratio <= 0:
            raise ValidationError("jam_ratio must be positive")
        if not (V_MIN < self.v_c < V_MAX):
            raise ValidationError("v_c must lie in (3, 130) km/h")
        if self.dilate_t < 0 or self.dilate_x < 0:
            raise ValidationError("dilation radii must be non-negative")
        if not (self.c_cong < 0 < self.c_free):
            raise ValidationError("need c_cong < 0 < c_free")


# --------------------------------------------------------------------------- kernels

LogKernel = Callable[[np.ndarray, np.ndarray], np.ndarray]


def iso_logkernel(tau: float, sigma: float) -> LogKernel:
    return lambda t, x: -np.abs(t / tau) - np.abs(x / sigma)


def wave_logkernel(c_kmh: float, tau: float, sigma: float) -> LogKernel:
    """Kernel skewed along characteristics x = c t."""
    c = c_kmh / MS_TO_KMH
    return lambda t, x: -np.abs(x) / sigma - np.abs(t - x / c) / tau


def _support(spec: GridSpec, tau: float, sigma: float, c_kmh: float | None = None) -> tuple[int, int]:
    reach_x = TRUNCATE * sigma
    reach_t = TRUNCATE * tau
    if c_kmh is not None:
        reach_t += reach_x / abs(c_kmh / MS_TO_KMH)
    return math.ceil(reach_t / spec.dt), math.ceil(reach_x / spec.dx)


def _truncated_kernel(logk: LogKernel, half: tuple[int, int], spec: GridSpec,
                    tau: float, sigma: float, c_kmh: float | None) -> np.ndarray:
    """Kernel with support cut at five decay lengths along each kernel axis."""
    t = np.arange(-half[0], half[0] + 1)[:, None] * spec.dt
    x = np.arange(-half[1], half[1] + 1)[None, :] * spec.dx
    along = t if c_kmh is None else t - x / (c_kmh / MS_TO_KMH)
    inside = (np.abs(x) <= TRUNCATE * sigma) & (np.abs(along) <= TRUNCATE * tau)
    return np.where(inside, np.exp(logk(t, x)), 0.0)


def kernel_smooth(values: np.ndarray, mask: np.ndarray, spec: GridSpec, logk: LogKernel,
                  tau: float, sigma: float, c_kmh: float | None = None) -> np.ndarray:
    """Normalized kernel average of ``values`` over cells where ``mask`` is set."""
    if not mask.any():
        raise ValidationError("kernel smoothing needs at least one datum")
    half = _support(spec, tau, sigma, c_kmh)
    kern = _truncated_kernel(logk, half, spec, tau, sigma, c_kmh)
    m = mask.astype(float)
    num = signal.fftconvolve(np.where(mask, values, 0.0), kern, mode="same")
    den = signal.fftconvolve(m, kern, mode="same")
    reached = den > _MIN_WEIGHT
    out = np.empty(values.shape)
    out[reached] = num[reached] / den[reached]
    if not reached.all():
        out[~reached] = _exact_smooth(values, mask, spec, logk, ~reached)
    return out


def _exact_smooth(values, mask, spec, logk, where, chunk=4096):
    """Untruncated kernel average, stabilized against underflow."""
    di, dj = np.nonzero(mask)
    dv = values[di, dj]
    td, xd = di * spec.dt, dj * spec.dx
    qi, qj = np.nonzero(where)
    res = np.empty(len(qi))
    for s in range(0, len(qi), chunk):
        ti = qi[s:s + chunk, None] * spec.dt
        xj = qj[s:s + chunk, None] * spec.dx
        logw = logk(ti - td[None, :], xj - xd[None, :])
        w = np.exp(logw - logw.max(axis=1, keepdims=True))
        res[s:s + chunk] = (w @ dv) / w.sum(axis=1)
    return res


def _dense(field: SparseSpeedField) -> tuple[np.ndarray, np.ndarray]:
    if len(field) == 0:
        raise ValidationError("estimator needs at least one measured cell")
    mask = np.zeros(field.spec.shape, dtype=bool)
    mask[field.i, field.j] = True
    return field.dense(fill=0.0), mask


# --------------------------------------------------------------------------- estimators

def isotropic(field: SparseSpeedField, p: IsoParams = IsoParams()) -> SpeedField:
    v, mask = _dense(field)
    out = kernel_smooth(v, mask, field.spec, iso_logkernel(p.tau, p.sigma), p.tau, p.sigma)
    return SpeedField(field.spec, np.clip(out, V_MIN, V_MAX))


def smooth_inverse(v: np.ndarray, mask: np.ndarray, spec: GridSpec, c_kmh: float | None,
                   tau: float, sigma: float) -> np.ndarray:
    """Smooth 1/v with an isotropic (``c_kmh=None``) or wave kernel; return speeds."""
    logk = iso_logkernel(tau, sigma) if c_kmh is None else wave_logkernel(c_kmh, tau, sigma)
    inv = np.where(mask, 1.0 / np.where(mask, v, 1.0), 0.0)
    return 1.0 / kernel_smooth(inv, mask, spec, logk, tau, sigma, c_kmh)


def asm_weight(v_cong, v_free, p: AsmParams = AsmParams()):
    """Share of the congested filter: 0.5 where min(v_cong, v_free) == v_thres."""
    return 0.5 * (1.0 + np.tanh((p.v_thres - np.minimum(v_cong, v_free)) / p.dv))


def asm_components(field: SparseSpeedField, p: AsmParams = AsmParams()):
    v, mask = _dense(field)
    v_cong = smooth_inverse(v, mask, field.spec, p.c_cong, p.tau, p.sigma)
    v_free = smooth_inverse(v, mask, field.spec, p.c_free, p.tau, p.sigma)
    return v_cong, v_free


def asm(field: SparseSpeedField, p: AsmParams = AsmParams()) -> SpeedField:
    v_cong, v_free = asm_components(field, p)
    w = asm_weight(v_cong, v_free, p)
    out = w * v_cong + (1.0 - w) * v_free
    return SpeedField(field.spec, np.clip(out, V_MIN, V_MAX))


# --------------------------------------------------------------------------- phase-based

FREE, SYNC, JAM = 0, 1, 2


def classify_phases(field: SparseSpeedField, p: PsmParams = PsmParams()) -> np.ndarray:
    """Phase label per datum (FREE, SYNC or JAM), aligned with ``field.v``.

    Slow data are moving-jam points when the congested share of their
    neighbourhood along the upstream wave characteristic exceeds the share
    along the time axis at fixed position by the factor ``jam_ratio``. Inside
    wide stationary congestion both shares are close to one.
    """
    v, mask = _dense(field)
    spec = field.spec
    slow = (mask & (v < p.v_c)).astype(float)
    along_wave = kernel_smooth(slow, mask, spec, wave_logkernel(p.c_cong, p.jam_tau, p.jam_sigma),
                               p.jam_tau, p.jam_sigma, p.c_cong)
    stationary = kernel_smooth(slow, mask, spec, iso_logkernel(p.sync_tau, p.sync_sigma),
                               p.sync_tau, p.sync_sigma)
    labels = np.full(len(field), FREE)
    is_slow = field.v < p.v_c
    jam = along_wave[field.i, field.j] > p.jam_ratio * stationary[field.i, field.j]
    labels[is_slow & jam] = JAM
    labels[is_slow & ~jam] = SYNC
    return labels


def _hull_fill(ii: np.ndarray, jj: np.ndarray, shape) -> np.ndarray:
    region = np.zeros(shape, dtype=bool)
    region[ii, jj] = True
    pts = np.column_stack([ii, jj]).astype(float)
    if len(np.unique(pts, axis=0)) < 3:
        return region
    try:
        tri = Delaunay(pts)
    except QhullError:  # collinear points
        return region
    a0, a1 = ii.min(), ii.max() + 1
    b0, b1 = jj.min(), jj.max() + 1
    gi, gj = np.mgrid[a0:a1, b0:b1]
    inside = tri.find_simplex(np.column_stack([gi.ravel(), gj.ravel()]).astype(float)) >= 0
    region[a0:a1, b0:b1] |= inside.reshape(gi.shape)
    return region


def phase_region(ii: np.ndarray, jj: np.ndarray, spec: GridSpec, p: PsmParams) -> np.ndarray:
    """Dilated convex hulls of clusters of same-phase cells."""
    region = np.zeros(spec.shape, dtype=bool)
    if len(ii) == 0:
        return region
    r_t = int(round(p.dilate_t / spec.dt))
    r_x = int(round(p.dilate_x / spec.dx))
    struct = np.ones((2 * r_t + 1, 2 * r_x + 1), dtype=bool)
    seeds = np.zeros(spec.shape, dtype=bool)
    seeds[ii, jj] = True
    grown = ndimage.binary_dilation(seeds, structure=struct) if (r_t or r_x) else seeds
    labels, n = ndimage.label(grown, structure=np.ones((3, 3)))
    owner = labels[ii, jj]
    for comp in range(1, n + 1):
        sel = owner == comp
        region |= _hull_fill(ii[sel], jj[sel], spec.shape)
    if r_t or r_x:
        region = ndimage.binary_dilation(region, structure=struct)
    return region


def psm_lite(field: SparseSpeedField, p: PsmParams = PsmParams()) -> SpeedField:
    """Simplified phase-based smoothing in three steps.

    1. label data as free / synchronized / moving jam and grow phase regions;
    2. smooth inverse speeds inside each region with that phase's kernel;
    3. blend the per-phase speeds with normalized membership weights.
    """
    spec = field.spec
    v, _ = _dense(field)
    labels = classify_phases(field, p)

    def data_mask(sel):
        m = np.zeros(spec.shape, dtype=bool)
        m[field.i[sel], field.j[sel]] = True
        return m

    free_sel = labels == FREE
    if not free_sel.any():
        free_sel = np.ones(len(field), dtype=bool)
    v_free = smooth_inverse(v, data_mask(free_sel), spec, p.c_free, p.free_tau, p.free_sigma)

    memberships = []
    fields = []
    for phase, c, tau, sigma in ((SYNC, None, p.sync_tau, p.sync_sigma),
                                 (JAM, p.c_cong, p.jam_tau, p.jam_sigma)):
        sel = labels == phase
        region = phase_region(field.i[sel], field.j[sel], spec, p)
        in_region = region[field.i, field.j]
        if not in_region.any():
            continue
        fields.append(smooth_inverse(v, data_mask(in_region), spec, c, tau, sigma))
        memberships.append(ndimage.uniform_filter(region.astype(float), size=3, mode="nearest"))

    if not fields:
        return SpeedField(spec, np.clip(v_free, V_MIN, V_MAX))
    m_cong = np.maximum.reduce(memberships)
    total = (1.0 - m_cong) + sum(memberships)
    out = (1.0 - m_cong) * v_free
    for m, f in zip(memberships, fields):
        out = out + m * f
    return SpeedField(spec, np.clip(out / total, V_MIN, V_MAX))
