from __future__ import annotations

import numpy as np
import torch
from torch import nn

from ..errors import ValidationError
from ..grid import SparseSpeedField, SpeedField
from ..patches import PatchLayout, decompose, stitch
from .models import model_layout


def infer_field(model: nn.Module, field: SparseSpeedField, layout: PatchLayout | None = None,
                batch_size: int = 64) -> SpeedField:
    """Reconstruct a full field patch by patch and stitch the outputs."""
    own = model_layout(model)
    if layout is None:
        layout = own
    elif layout != own:
        raise ValidationError(f"layout {layout} does not match the model's {own}")
    patches = decompose(field, layout)
    model.eval()
    outputs = []
    with torch.no_grad():
        for k in range(0, len(patches), batch_size):
            chunk = patches[k:k + batch_size]
            x = torch.from_numpy(np.stack([np.stack([p.speeds, p.occupancy]) for p in chunk]))
            y = model(x).numpy().astype(float)
            outputs += [(p.origin, out) for p, out in zip(chunk, y)]
    return stitch(outputs, field.spec, layout)
