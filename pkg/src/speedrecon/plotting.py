"""Heatmaps and sweep plots. Convenience outputs only; nothing reads them back."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .grid import V_MAX, V_MIN, SparseSpeedField, SpeedField  # noqa: E402


def _extent(spec):
    return [spec.t0 / 60.0, (spec.t0 + spec.n_t * spec.dt) / 60.0,
            spec.x0 / 1000.0, (spec.x0 + spec.n_x * spec.dx) / 1000.0]


def speed_heatmap(ax, field, title=None, vmin=V_MIN, vmax=V_MAX):
    """Time on the horizontal axis, road position vertical, slow = warm colors."""
    if isinstance(field, SparseSpeedField):
        data = field.dense()
    else:
        data = field.v
    img = ax.imshow(np.ma.masked_invalid(data).T, origin="lower", aspect="auto",
                    cmap="RdYlGn", vmin=vmin, vmax=vmax, extent=_extent(field.spec),
                    interpolation="nearest")
    ax.set_xlabel("time [min]")
    ax.set_ylabel("position [km]")
    if title:
        ax.set_title(title)
    return img


def save_heatmap(path, field: SpeedField | SparseSpeedField, title=None):
    fig, ax = plt.subplots(figsize=(8, 4.5))
    img = speed_heatmap(ax, field, title)
    fig.colorbar(img, ax=ax, label="speed [km/h]")
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)


def save_panels(path, panels, ncols=2):
    """Several (title, field) heatmaps on one figure."""
    n = len(panels)
    nrows = -(-n // ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(6 * ncols, 3.4 * nrows), squeeze=False)
    img = None
    for ax, (title, fld) in zip(axes.ravel(), panels):
        img = speed_heatmap(ax, fld, title)
    for ax in axes.ravel()[n:]:
        ax.axis("off")
    if img is not None:
        fig.colorbar(img, ax=axes.ravel().tolist(), label="speed [km/h]")
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def save_sweep_plot(path, summary_rows):
    """Mean IMAE against train ratio p, one line per method."""
    fig, ax = plt.subplots(figsize=(6, 4))
    methods = sorted({r["method"] for r in summary_rows})
    for m in methods:
        rows = sorted((r for r in summary_rows if r["method"] == m), key=lambda r: r["p"])
        ax.plot([r["p"] for r in rows], [r["mean"] for r in rows], marker="o", label=m)
    ax.set_xlabel("train ratio p")
    ax.set_ylabel("IMAE [h/km]")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
