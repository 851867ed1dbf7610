"""Tiling of a space-time domain into input/output patches and stitching back.

Output windows (L_T x L_X) tile the domain on a regular grid starting at
cell (0, 0). Each input window (K_T x K_X) shares its center with its output
window, i.e. it reaches (K - L) / 2 cells further on every side. Cells
outside the domain are empty.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError
from .grid import V_MAX, V_MIN, GridSpec, SparseSpeedField, SpeedField, denormalize, network_input


@dataclass(frozen=True)
class PatchLayout:
    k_t: int = 64
    k_x: int = 64
    l_t: int = 32
    l_x: int = 32

    def __post_init__(self):
        for k, l in ((self.k_t, self.l_t), (self.k_x, self.l_x)):
            if not (k >= l >= 1):
                raise ValidationError(f"patch sizes need K >= L >= 1, got K={k}, L={l}")
            if (k - l) % 2:
                raise ValidationError(f"K - L must be even for a symmetric margin, got {k - l}")

    @property
    def margin(self) -> tuple[int, int]:
        return (self.k_t - self.l_t) // 2, (self.k_x - self.l_x) // 2

    def grid_counts(self, n_t: int, n_x: int) -> tuple[int, int]:
        return -(-n_t // self.l_t), -(-n_x // self.l_x)


@dataclass
class Patch:
    """Input window of a tile.

    ``origin`` is the input window's corner in padded-domain coordinates,
    which coincides with the output window's corner in domain coordinates.
    """

    origin: tuple[int, int]
    speeds: np.ndarray
    occupancy: np.ndarray


def crop(arr: np.ndarray, i0: int, j0: int, h: int, w: int, fill=0.0) -> np.ndarray:
    """Window ``arr[i0:i0+h, j0:j0+w]`` with out-of-range cells set to ``fill``."""
    out = np.full((h, w), fill, dtype=arr.dtype)
    n_t, n_x = arr.shape
    a0, a1 = max(i0, 0), min(i0 + h, n_t)
    b0, b1 = max(j0, 0), min(j0 + w, n_x)
    if a1 > a0 and b1 > b0:
        out[a0 - i0:a1 - i0, b0 - j0:b1 - j0] = arr[a0:a1, b0:b1]
    return out


def output_origins(spec: GridSpec, layout: PatchLayout) -> list[tuple[int, int]]:
    n_t, n_x = spec.shape
    if n_t < 1 or n_x < 1:
        raise ValidationError("empty domain")
    g_t, g_x = layout.grid_counts(n_t, n_x)
    return [(a * layout.l_t, b * layout.l_x) for a in range(g_t) for b in range(g_x)]


def input_window(speeds: np.ndarray, occ: np.ndarray, origin: tuple[int, int],
                 layout: PatchLayout) -> tuple[np.ndarray, np.ndarray]:
    """Input-window crops for the output window whose corner is ``origin``."""
    m_t, m_x = layout.margin
    i0, j0 = origin[0] - m_t, origin[1] - m_x
    return (crop(speeds, i0, j0, layout.k_t, layout.k_x),
            crop(occ, i0, j0, layout.k_t, layout.k_x))


def decompose(field: SparseSpeedField, layout: PatchLayout = PatchLayout()) -> list[Patch]:
    speeds, occ = network_input(field)
    return [Patch(origin, *input_window(speeds, occ, origin, layout))
            for origin in output_origins(field.spec, layout)]


def stitch(outputs: Iterable[tuple[Sequence[int], np.ndarray]], spec: GridSpec,
           layout: PatchLayout = PatchLayout()) -> SpeedField:
    """Assemble normalized L x L outputs into a km/h field, no blending.

    Raises if a tile of the regular tiling is missing, duplicated or
    misplaced. Overhanging parts of edge tiles are discarded.
    """
    expected = set(output_origins(spec, layout))
    n_t, n_x = spec.shape
    out = np.full(spec.shape, np.nan)
    seen = set()
    for origin, block in outputs:
        origin = (int(origin[0]), int(origin[1]))
        if origin not in expected:
            raise ValidationError(f"tile origin {origin} is not part of the tiling")
        if origin in seen:
            raise ValidationError(f"tile {origin} given twice")
        block = np.asarray(block)
        if block.shape != (layout.l_t, layout.l_x):
            raise ValidationError(f"tile {origin} has shape {block.shape}")
        seen.add(origin)
        i0, j0 = origin
        h, w = min(layout.l_t, n_t - i0), min(layout.l_x, n_x - j0)
        out[i0:i0 + h, j0:j0 + w] = block[:h, :w]
    missing = expected - seen
    if missing:
        raise ValidationError(f"{len(missing)} tile(s) missing, e.g. {sorted(missing)[0]}")
    return SpeedField(spec, np.clip(denormalize(out), V_MIN, V_MAX))
