"""Synthetic congestion scenarios and probe-vehicle sampling.

A scenario is free flow plus a list of congestion primitives; the rendered
speed of a cell is the minimum over all primitives covering it. Probe
vehicles are non-interacting samplers driving through the rendered field.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import flatconf
from .errors import ValidationError
from .grid import MS_TO_KMH, V_MAX, V_MIN, GridSpec, SpeedField, Trajectory

log = logging.getLogger(__name__)

KINDS = ("moving_jam", "stationary_band", "mega_jam")


@dataclass
class CongestionPrimitive:
    """One congestion pattern.

    ``moving_jam`` uses the anchor/c/width/lifetime fields; the two stationary
    kinds use the space and time intervals. Speeds ramp linearly from
    ``v_in`` to free flow over ``soft_x`` meters and ``soft_t`` seconds
    outside the core.
    """

    kind: str
    v_in: float
    soft_x: float = 200.0
    soft_t: float = 120.0
    anchor_t: float = 0.0
    anchor_x: float = 0.0
    c: float = -15.0  # km/h, negative = upstream
    width: float = 300.0
    lifetime: float = 1800.0
    x_start: float = 0.0
    x_end: float = 0.0
    t_start: float = 0.0
    t_end: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown primitive kind {self.kind!r}")
        if not (V_MIN <= self.v_in <= V_MAX):
            raise ValidationError(f"v_in={self.v_in} outside [{V_MIN}, {V_MAX}]")
        if self.soft_x < 0 or self.soft_t < 0:
            raise ValidationError("edge softness must be non-negative")
        if self.kind == "moving_jam":
            if self.width <= 0 or self.lifetime <= 0:
                raise ValidationError("moving jam needs positive width and lifetime")
        elif not (self.x_end > self.x_start and self.t_end > self.t_start):
            raise ValidationError(f"{self.kind} needs non-empty space and time intervals")

    def membership(self, t: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Degree in [0, 1] to which points (t, x) lie inside the pattern."""
        if self.kind == "moving_jam":
            center = self.anchor_x + self.c / MS_TO_KMH * (t - self.anchor_t)
            out_x = np.maximum(np.abs(x - center) - 0.5 * self.width, 0.0)
            out_t = np.maximum.reduce([self.anchor_t - t, t - self.anchor_t - self.lifetime,
                                       np.zeros_like(t)])
        else:
            out_x = np.maximum.reduce([self.x_start - x, x - self.x_end, np.zeros_like(x)])
            out_t = np.maximum.reduce([self.t_start - t, t - self.t_end, np.zeros_like(t)])
        return np.minimum(_ramp(out_x, self.soft_x), _ramp(out_t, self.soft_t))


def _ramp(dist, soft):
    if soft == 0:
        return (dist <= 0).astype(float)
    return np.clip(1.0 - dist / soft, 0.0, 1.0)


@dataclass
class Scenario:
    spec: GridSpec
    primitives: list[CongestionPrimitive] = field(default_factory=list)
    free_speed: float = 120.0
    rng_seed: int = 0
    name: str = "scenario"

    def __post_init__(self):
        if not (V_MIN <= self.free_speed <= V_MAX):
            raise ValidationError("free_speed outside [3, 130] km/h")


@dataclass
class ProbeConfig:
    rate: float = 15.0  # vehicles per hour entering at the upstream end
    interval_min: float = 5.0
    interval_max: float = 20.0
    noise_std: float = 0.05
    rng_seed: int = 0
    max_step: float = 1.0  # s

    def __post_init__(self):
        if self.rate <= 0:
            raise ValidationError("probe rate must be positive")
        if not (1.0 <= self.interval_min <= self.interval_max <= 60.0):
            raise ValidationError("sampling interval range must lie within [1, 60] s")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be non-negative")


def render_ground_truth(scn: Scenario) -> SpeedField:
    spec = scn.spec
    t, x = np.meshgrid(spec.t_centers(), spec.x_centers(), indexing="ij")
    v = np.full(spec.shape, float(scn.free_speed))
    for prim in scn.primitives:
        m = prim.membership(t, x)
        np.minimum(v, scn.free_speed + m * (prim.v_in - scn.free_speed), out=v)
    return SpeedField(spec, np.clip(v, V_MIN, V_MAX))


def _drive(field: SpeedField, t_entry: np.ndarray, max_step: float | None):
    """Integrate dx/dt = v(t, x) for all vehicles at once.

    The field is cell-constant, so motion between events is exact; events are
    cell-border crossings and the ``max_step`` cap. Returns one (t, x) path
    per vehicle.
    """
    spec = field.spec
    n_t, n_x = spec.shape
    t_end = spec.t0 + spec.duration
    x_end = spec.x0 + spec.length
    vel = np.clip(field.v, V_MIN, V_MAX) / MS_TO_KMH

    n = len(t_entry)
    t = t_entry.astype(float).copy()
    x = np.full(n, float(spec.x0))
    ci = np.floor((t - spec.t0) / spec.dt).astype(np.int64)
    cj = np.zeros(n, dtype=np.int64)
    active = (ci >= 0) & (ci < n_t) & (t < t_end)
    rec_t, rec_x, rec_active = [t.copy()], [x.copy()], [active.copy()]
    while active.any():
        a = np.nonzero(active)[0]
        v = vel[ci[a], cj[a]]
        to_tb = np.minimum(spec.t0 + (ci[a] + 1) * spec.dt, t_end) - t[a]
        to_xb = (np.minimum(spec.x0 + (cj[a] + 1) * spec.dx, x_end) - x[a]) / v
        h = np.minimum(to_tb, to_xb)
        if max_step:
            h = np.minimum(h, max_step)
        hit_t = to_tb <= h
        hit_x = to_xb <= h
        t[a] = np.where(hit_t, t[a] + to_tb, t[a] + h)
        x[a] = np.where(hit_x, np.minimum(spec.x0 + (cj[a] + 1) * spec.dx, x_end), x[a] + v * h)
        ci[a] += hit_t
        cj[a] += hit_x
        done = (ci[a] >= n_t) | (cj[a] >= n_x) | (t[a] >= t_end) | (x[a] >= x_end)
        rec_t.append(t.copy())
        rec_x.append(x.copy())
        active[a[done]] = False
        rec_active.append(active.copy())

    T = np.array(rec_t)
    X = np.array(rec_x)
    A = np.array(rec_active)
    paths = []
    for k in range(n):
        # a vehicle's last recorded point is the step right after it deactivated
        steps = int(A[:, k].sum()) + 1
        steps = min(steps, T.shape[0])
        paths.append((T[:steps, k], X[:steps, k]))
    return paths


def sample_probes(field: SpeedField, cfg: ProbeConfig, prefix: str = "v") -> list[Trajectory]:
    """Drive probe vehicles through ``field`` and record noisy GPS-like traces."""
    spec = field.spec
    rng = np.random.default_rng(cfg.rng_seed)
    t_end = spec.t0 + spec.duration
    mean_gap = 3600.0 / cfg.rate
    entries = []
    t = spec.t0 + rng.exponential(mean_gap)
    while t < t_end:
        entries.append(t)
        t += rng.exponential(mean_gap)
    if not entries:
        return []
    entries = np.array(entries)
    intervals = rng.uniform(cfg.interval_min, cfg.interval_max, size=len(entries))
    paths = _drive(field, entries, cfg.max_step)

    trajs = []
    for k, ((pt, px), step) in enumerate(zip(paths, intervals)):
        t_stop = pt[-1]
        ts = pt[0] + step * np.arange(int(np.floor((t_stop - pt[0]) / step + 1e-9)) + 1)
        # draw noise for every vehicle to keep the stream aligned across vehicles
        noise = rng.standard_normal(max(len(ts) - 1, 0))
        if len(ts) < 2:
            continue
        xs = np.interp(ts, pt, px)
        seg_t = np.diff(ts)
        seg_x = np.diff(xs)
        factor = 1.0 + cfg.noise_std * noise
        lo = np.maximum(0.2, seg_x / (seg_t * V_MAX / MS_TO_KMH))
        hi = np.where(seg_x > 0, seg_x / (seg_t * V_MIN / MS_TO_KMH), np.inf)
        factor = np.clip(factor, lo, np.maximum(lo, hi))
        ts_noisy = ts[0] + np.concatenate([[0.0], np.cumsum(seg_t * factor)])
        trajs.append(Trajectory(f"{prefix}{k:05d}", ts_noisy, xs))
    return trajs


# ---------------------------------------------------------------- scenario library

COMPOSITIONS = ("band_with_jams", "moving_jams", "mega_jam", "mixed")


def _band(rng, spec, v_lo, v_hi, kind):
    x_hi = spec.x0 + spec.length
    x_end = rng.uniform(spec.x0 + 0.55 * spec.length, x_hi - 0.1 * spec.length)
    extent = rng.uniform(1000.0, 3000.0) if kind == "stationary_band" else rng.uniform(1500.0, 4000.0)
    t_start = spec.t0 + rng.uniform(0.1, 0.4) * spec.duration
    span = rng.uniform(2700.0, 6000.0)
    return CongestionPrimitive(
        kind=kind, v_in=float(rng.uniform(v_lo, v_hi)),
        soft_x=float(rng.uniform(150.0, 400.0)), soft_t=float(rng.uniform(120.0, 300.0)),
        x_start=float(max(spec.x0, x_end - extent)), x_end=float(x_end),
        t_start=float(t_start), t_end=float(min(t_start + span, spec.t0 + spec.duration)),
    )


def _jam(rng, t_anchor, x_anchor):
    return CongestionPrimitive(
        kind="moving_jam", v_in=float(rng.uniform(5.0, 25.0)),
        soft_x=float(rng.uniform(100.0, 250.0)), soft_t=float(rng.uniform(60.0, 240.0)),
        anchor_t=float(t_anchor), anchor_x=float(x_anchor),
        c=float(rng.uniform(-18.0, -12.0)), width=float(rng.uniform(200.0, 500.0)),
        lifetime=float(rng.uniform(900.0, 3000.0)),
    )


def _compose(kind: str, rng, spec: GridSpec) -> list[CongestionPrimitive]:
    prims: list[CongestionPrimitive] = []
    x_hi = spec.x0 + spec.length
    if kind in ("band_with_jams", "mixed"):
        band = _band(rng, spec, 35.0, 60.0, "stationary_band")
        prims.append(band)
        for _ in range(int(rng.integers(1, 5))):
            prims.append(_jam(rng, rng.uniform(band.t_start, band.t_end),
                              band.x_end - rng.uniform(0.0, 500.0)))
    if kind == "moving_jams":
        for _ in range(int(rng.integers(2, 6))):
            prims.append(_jam(rng, spec.t0 + rng.uniform(0.05, 0.8) * spec.duration,
                              rng.uniform(spec.x0 + 0.5 * spec.length, x_hi)))
    if kind in ("mega_jam", "mixed"):
        mega = _band(rng, spec, 3.0, 12.0, "mega_jam")
        if kind == "mixed" and prims:
            # keep the mega-jam clear of the band in space where the road allows
            mega.x_end = float(min(mega.x_end, prims[0].x_start - 500.0))
            mega.x_start = float(min(mega.x_start, mega.x_end - 1500.0))
            if mega.x_start < spec.x0:
                mega.x_start = float(spec.x0)
            if mega.x_end <= mega.x_start:
                mega = _band(rng, spec, 3.0, 12.0, "mega_jam")
        prims.append(mega)
        if rng.random() < 0.5:
            prims.append(_jam(rng, rng.uniform(mega.t_start, mega.t_end), mega.x_start))
    return prims


def scenario_library(n: int, seed: int = 0, free_speed: float = 120.0) -> list[Scenario]:
    """Deterministic set of ``n`` randomized congestion scenarios.

    Compositions are assigned round-robin over a shuffled order, so every
    primitive kind appears in a fixed share of the library.
    """
    if n < 1:
        raise ValidationError("library size must be >= 1")
    rng = np.random.default_rng(seed)
    kinds = [COMPOSITIONS[k % len(COMPOSITIONS)] for k in range(n)]
    rng.shuffle(kinds)
    out = []
    for k, kind in enumerate(kinds):
        duration = 60.0 * round(rng.uniform(120.0, 210.0))
        length = 100.0 * round(rng.uniform(80.0, 140.0))
        spec = GridSpec(t0=0.0, duration=duration, x0=0.0, length=length)
        prims = _compose(kind, rng, spec)
        out.append(Scenario(spec=spec, primitives=prims, free_speed=free_speed,
                            rng_seed=int(rng.integers(2**31 - 1)), name=f"scn{k:03d}"))
    return out


def library_stats(scenarios: list[Scenario]) -> dict[str, float]:
    """Fraction of scenarios containing each primitive kind."""
    n = len(scenarios)
    return {kind: sum(any(p.kind == kind for p in s.primitives) for s in scenarios) / n
            for kind in KINDS}


# ---------------------------------------------------------------- scenario files

_GRID_KEYS = ("t0", "duration", "x0", "length", "dt", "dx")
_PRIM_FIELDS = [f.name for f in fields(CongestionPrimitive)]
_PROBE_FIELDS = [f.name for f in fields(ProbeConfig)]


def scenario_to_flat(scn: Scenario, probes: ProbeConfig | None = None) -> dict:
    out = {"name": scn.name, "free_speed": float(scn.free_speed), "seed": int(scn.rng_seed)}
    for key in _GRID_KEYS:
        out[f"grid.{key}"] = float(getattr(scn.spec, key))
    for k, prim in enumerate(scn.primitives):
        for name in _PRIM_FIELDS:
            value = getattr(prim, name)
            out[f"primitive.{k}.{name}"] = value if name == "kind" else float(value)
    if probes is not None:
        for name in _PROBE_FIELDS:
            value = getattr(probes, name)
            out[f"probe.{name}"] = int(value) if name == "rng_seed" else float(value)
    return out


def scenario_from_flat(conf: dict) -> tuple[Scenario, ProbeConfig | None]:
    grid = flatconf.subtree(conf, "grid")
    spec = GridSpec(**{k: flatconf.get_float(grid, k, getattr(GridSpec, k)) for k in _GRID_KEYS})
    prims = []
    groups = flatconf.subtree(conf, "primitive")
    indices = sorted({int(k.split(".", 1)[0]) for k in groups})
    for idx in indices:
        sub = flatconf.subtree(groups, str(idx))
        unknown = set(sub) - set(_PRIM_FIELDS)
        if unknown:
            raise ValidationError(f"primitive.{idx}: unknown keys {sorted(unknown)}")
        if "kind" not in sub or "v_in" not in sub:
            raise ValidationError(f"primitive.{idx}: 'kind' and 'v_in' are required")
        kw = {k: (v if k == "kind" else flatconf.get_float(sub, k)) for k, v in sub.items()}
        prims.append(CongestionPrimitive(**kw))
    scn = Scenario(spec=spec, primitives=prims,
                   free_speed=flatconf.get_float(conf, "free_speed", 120.0),
                   rng_seed=flatconf.get_int(conf, "seed", 0),
                   name=conf.get("name", "scenario"))
    probe_conf = flatconf.subtree(conf, "probe")
    probes = None
    if probe_conf:
        unknown = set(probe_conf) - set(_PROBE_FIELDS)
        if unknown:
            raise ValidationError(f"probe: unknown keys {sorted(unknown)}")
        kw = {k: flatconf.get_float(probe_conf, k) for k in probe_conf}
        if "rng_seed" in kw:
            kw["rng_seed"] = int(kw["rng_seed"])
        probes = ProbeConfig(**kw)
    return scn, probes


def save_scenario(path, scn: Scenario, probes: ProbeConfig | None = None):
    flatconf.dump(path, scenario_to_flat(scn, probes), header=f"scenario {scn.name}")


def load_scenario(path) -> tuple[Scenario, ProbeConfig | None]:
    return scenario_from_flat(flatconf.load(Path(path)))


def default_probes(scn: Scenario, rate: float = 15.0) -> ProbeConfig:
    """Probe settings used for a library scenario; the seed derives from the scenario's."""
    return ProbeConfig(rate=rate, rng_seed=int(scn.rng_seed) ^ 0x5EED)
