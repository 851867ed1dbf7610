"""Training samples: random input/target patch pairs from split probe traces.

Per sample a scenario is picked uniformly, a ratio p is drawn from the
configured range, the scenario's traces are split at trace level, and an
output window is placed uniformly on the domain. The input patch is built
from the p-share of traces, the sparse target from the rest.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError
from ..grid import TraceSet, normalize, split_count
from ..patches import PatchLayout

log = logging.getLogger(__name__)


@dataclass
class SampleSet:
    """Stacked samples.

    x: (N, 2, K_T, K_X) float32, normalized speeds and occupancy.
    target: (N, L_T, L_X) float32 km/h, 0 where ``mask`` is 0.
    """

    x: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    p: np.ndarray
    scenario: np.ndarray
    origin: np.ndarray
    input_traces: list = field(default_factory=list)

    def __len__(self):
        return len(self.x)

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        return SampleSet(self.x[idx], self.target[idx], self.mask[idx], self.p[idx],
                         self.scenario[idx], self.origin[idx],
                         [self.input_traces[k] for k in idx] if self.input_traces else [])


def make_sample(ts: TraceSet, inputs, targets, origin, layout: PatchLayout):
    """Input tensor (2, K_T, K_X), target (L_T, L_X) km/h and mask for one output origin."""
    m_t, m_x = layout.margin
    a, b = origin
    vin = ts.window(inputs, a - m_t, b - m_x, layout.k_t, layout.k_x)
    occ = np.isfinite(vin)
    x = np.zeros((2, layout.k_t, layout.k_x), dtype=np.float32)
    x[0][occ] = normalize(vin[occ])
    x[1] = occ
    vgt = ts.window(targets, a, b, layout.l_t, layout.l_x)
    mask = np.isfinite(vgt)
    return x, np.where(mask, vgt, 0.0).astype(np.float32), mask


def augment(sets: list[TraceSet], n: int, layout: PatchLayout = PatchLayout(),
            p_range=(0.1, 0.9), seed: int = 0) -> SampleSet:
    """Draw ``n`` samples from ``sets``; scenarios with fewer than 2 traces are skipped."""
    if n < 1:
        raise ValidationError("sample count must be >= 1")
    lo, hi = p_range
    if not (0.0 < lo <= hi < 1.0):
        raise ValidationError(f"p range {p_range} must lie inside (0, 1)")
    usable = []
    for k, ts in enumerate(sets):
        if ts.n < 2:
            log.warning("scenario %s has %d trace(s); skipped", ts.name or k, ts.n)
        else:
            usable.append(k)
    if not usable:
        raise ValidationError("no scenario with at least 2 traces")

    rng = np.random.default_rng(seed)
    xs = np.zeros((n, 2, layout.k_t, layout.k_x), dtype=np.float32)
    tg = np.zeros((n, layout.l_t, layout.l_x), dtype=np.float32)
    mk = np.zeros((n, layout.l_t, layout.l_x), dtype=bool)
    ps = np.zeros(n)
    scn = np.zeros(n, dtype=np.int64)
    org = np.zeros((n, 2), dtype=np.int64)
    kept = []
    for s in range(n):
        k = usable[rng.integers(len(usable))]
        ts = sets[k]
        p = rng.uniform(lo, hi)
        perm = rng.permutation(ts.n)
        cut = split_count(ts.n, p)
        inputs, targets = np.sort(perm[:cut]), np.sort(perm[cut:])
        n_t, n_x = ts.spec.shape
        a = int(rng.integers(max(n_t - layout.l_t, 0) + 1))
        b = int(rng.integers(max(n_x - layout.l_x, 0) + 1))
        xs[s], tg[s], mk[s] = make_sample(ts, inputs, targets, (a, b), layout)
        ps[s], scn[s], org[s] = p, k, (a, b)
        kept.append(inputs)
    return SampleSet(xs, tg, mk, ps, scn, org, kept)
