"""Space-time traffic speed reconstruction from sparse probe-vehicle data."""
from .errors import NumericalError, ValidationError
from .grid import (GridSpec, SparseSpeedField, SpeedField, TraceSet, Trajectory, aggregate,
                   normalize, occupancy, rasterize_trajectory)
from .patches import Patch, PatchLayout, decompose, stitch

__version__ = "0.1.0"

__all__ = [
    "GridSpec", "NumericalError", "Patch", "PatchLayout", "SparseSpeedField", "SpeedField",
    "TraceSet", "Trajectory", "ValidationError", "aggregate", "decompose", "normalize",
    "occupancy", "rasterize_trajectory", "stitch", "__version__",
]
