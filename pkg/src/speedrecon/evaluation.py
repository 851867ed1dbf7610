"""IMAE scoring, method-difference maps and the train-ratio sweep."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .grid import V_MAX, V_MIN, SparseSpeedField, SpeedField, TraceSet

log = logging.getLogger(__name__)

Method = Callable[[SparseSpeedField], SpeedField]


def _cell_errors(est: SpeedField, gt: SparseSpeedField) -> np.ndarray:
    if est.spec.shape != gt.spec.shape:
        raise ValidationError(f"estimate shape {est.spec.shape} != ground truth {gt.spec.shape}")
    v = np.clip(est.v[gt.i, gt.j], V_MIN, V_MAX)
    return np.abs(1.0 / v - 1.0 / gt.v)


def imae(est: SpeedField, gt: SparseSpeedField) -> float:
    """Mean absolute inverse-speed error in h/km over the ground-truth cells."""
    if len(gt) == 0:
        raise ValidationError("empty ground-truth set")
    return float(np.mean(_cell_errors(est, gt)))


@dataclass
class DeltaMap:
    i: np.ndarray
    j: np.ndarray
    delta: np.ndarray

    def dense(self, shape, fill=np.nan) -> np.ndarray:
        out = np.full(shape, fill)
        out[self.i, self.j] = self.delta
        return out


def imae_delta_map(v1: SpeedField, v2: SpeedField, gt: SparseSpeedField) -> DeltaMap:
    """Per ground-truth cell, error of ``v1`` minus error of ``v2`` (h/km).

    Positive where ``v2`` is closer. Deltas may be negative or zero, so the
    result is a plain coordinate map rather than a speed field.
    """
    if v1.spec != v2.spec:
        raise ValidationError("fields do not share a grid")
    d = _cell_errors(v1, gt) - _cell_errors(v2, gt)
    return DeltaMap(gt.i.copy(), gt.j.copy(), d)


@dataclass
class SweepResult:
    """Per-run rows ``(method, p, iteration, imae)`` and their summary."""

    rows: list[tuple[str, float, int, float]] = field(default_factory=list)
    iterations: int = 0

    def summary(self) -> list[dict]:
        out = []
        keys = sorted({(m, p) for m, p, _, _ in self.rows})
        for m, p in keys:
            vals = np.array([e for mm, pp, _, e in self.rows if mm == m and pp == p])
            out.append({"method": m, "p": p, "mean": float(vals.mean()),
                        "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                        "n": len(vals)})
        return out

    def mean(self, method: str, p: float) -> float:
        for r in self.summary():
            if r["method"] == method and np.isclose(r["p"], p):
                return r["mean"]
        raise KeyError((method, p))


def _split_rng(seed: int, p_index: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, p_index, iteration]))


def density_sweep(traces: TraceSet, methods: Mapping[str, Method], p_list: Sequence[float],
                  iterations: int, seed: int = 0, on_run=None) -> SweepResult:
    """Score every method on identical random trace splits for each (p, iteration).

    The split for (p_list[k], iteration) depends only on (seed, k, iteration).
    ``on_run(p, iteration, input_field)`` is an optional observer hook.
    """
    if iterations < 1:
        raise ValidationError("iterations must be >= 1")
    if not methods:
        raise ValidationError("no methods given")
    res = SweepResult(iterations=iterations)
    if traces.n < 2:
        log.warning("scenario %s has %d trace(s); nothing to split", traces.name, traces.n)
        return res
    for k, p in enumerate(p_list):
        if not (0.0 < p < 1.0):
            raise ValidationError(f"train ratio {p} outside (0, 1)")
        for it in range(iterations):
            rec_idx, gt_idx = traces.split(p, _split_rng(seed, k, it))
            field_in = traces.field(rec_idx)
            gt = traces.field(gt_idx)
            if len(field_in) == 0 or len(gt) == 0:
                log.warning("p=%.2f iteration %d: empty split inside the domain; skipped", p, it)
                continue
            if on_run is not None:
                on_run(p, it, field_in)
            for name, method in methods.items():
                res.rows.append((name, float(p), it, imae(method(field_in), gt)))
    return res


def write_runs_csv(path, result: SweepResult):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "p", "iteration", "imae"])
        for m, p, it, e in result.rows:
            w.writerow([m, f"{p:g}", it, f"{e:.9f}"])


def write_summary_csv(path, result: SweepResult):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "p", "mean", "std", "n"])
        for r in result.summary():
            w.writerow([r["method"], f"{r['p']:g}", f"{r['mean']:.9f}", f"{r['std']:.9f}", r["n"]])
