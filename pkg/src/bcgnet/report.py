"""Map rendering and report figures.

Change maps are written as dependency-free netpbm images so output
bytes are exact and inspectable: binary maps as 8-bit PGM (P5, changed
pixels white), multiclass maps as PPM (P6) under a fixed palette.
Report figures (maps, abundance panels, training curves, trend charts)
are rendered with matplotlib next to the delimited metric tables.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.colors import ListedColormap

from .cube import AbundanceCube, ChangeMap
from .model import EpochLog

# Class colors in documented order: class 1 red, 2 green, 3 blue, 4 yellow,
# 5 orange, 6 purple, 7 cyan, 8 magenta, then teal, brown for overflow.
PALETTE: tuple[tuple[int, int, int], ...] = (
    (230, 25, 75), (60, 180, 75), (0, 130, 200), (255, 225, 25),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (0, 128, 128), (170, 110, 40),
)
UNCHANGED_RGB = (255, 255, 255)
UNMATCHED_RGB = (0, 0, 0)

_PNG_METADATA = {"Software": None}  # keep png bytes reproducible


def render_map(cmap: ChangeMap, path: str | Path,
               palette: tuple[tuple[int, int, int], ...] = PALETTE,
               binary: bool | None = None) -> None:
    """Write a change map as PGM (binary) or PPM (multiclass).

    Binary maps use 0 for unchanged and 255 for changed.  Multiclass
    maps draw label 0 white, the sentinel 255 black, and class i in
    ``palette[i - 1]``; labels beyond the palette are an error.  When
    ``binary`` is None, maps whose labels are all 0/1 render as PGM.
    """
    labels = cmap.labels
    if binary is None:
        binary = bool(np.isin(labels, (0, 1)).all())
    h, w = labels.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if binary:
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("binary rendering requires labels in {0, 1}")
        body = np.where(labels > 0, 255, 0).astype(np.uint8)
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + body.tobytes())
        return
    out_of_range = labels[(labels != 0) & (labels != 255) & (labels > len(palette))]
    if out_of_range.size:
        raise ValueError(f"label {int(out_of_range[0])} has no palette entry")
    rgb = np.empty((h, w, 3), dtype=np.uint8)
    rgb[:] = UNCHANGED_RGB
    rgb[labels == 255] = UNMATCHED_RGB
    for i, color in enumerate(palette, start=1):
        rgb[labels == i] = color
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def parse_netpbm(path: str | Path) -> np.ndarray:
    """Read back a P5/P6 file written by :func:`render_map`."""
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    if maxval != b"255":
        raise ValueError(f"unexpected maxval {maxval!r}")
    if magic == b"P5":
        return np.frombuffer(body, dtype=np.uint8, count=h * w).reshape(h, w)
    if magic == b"P6":
        return np.frombuffer(body, dtype=np.uint8, count=h * w * 3).reshape(h, w, 3)
    raise ValueError(f"not a P5/P6 file: {magic!r}")


def _label_colormap(max_label: int) -> ListedColormap:
    colors = [np.array(UNCHANGED_RGB) / 255.0]
    for i in range(1, max_label + 1):
        colors.append(np.array(PALETTE[(i - 1) % len(PALETTE)]) / 255.0)
    return ListedColormap(colors)


def fig_change_map(cmap: ChangeMap, path: str | Path, title: str = "") -> None:
    """Render a change map as a PNG figure."""
    labels = cmap.labels.copy()
    labels[labels == 255] = 0  # sentinel drawn as background in figures
    top = int(labels.max())
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(labels, cmap=_label_colormap(max(top, 1)), vmin=0, vmax=max(top, 1),
              interpolation="nearest")
    ax.set_title(title)
    ax.set_axis_off()
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=_PNG_METADATA)
    plt.close(fig)


def fig_abundance(abund: AbundanceCube, path: str | Path, title: str = "") -> None:
    """One grayscale panel per endmember."""
    k = abund.k
    fig, axes = plt.subplots(1, k, figsize=(2.2 * k, 2.4))
    axes = np.atleast_1d(axes)
    for i, ax in enumerate(axes):
        ax.imshow(abund.values[:, :, i], cmap="viridis", vmin=0.0, vmax=1.0,
                  interpolation="nearest")
        ax.set_title(f"endmember {i}", fontsize=8)
        ax.set_axis_off()
    if title:
        fig.suptitle(title)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=_PNG_METADATA)
    plt.close(fig)


def fig_training_curves(log: list[EpochLog], path: str | Path) -> None:
    """Loss components against epoch."""
    epochs = [e.epoch for e in log]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, [e.l_cos_x for e in log], label="cos x")
    ax.plot(epochs, [e.l_cos_y for e in log], label="cos y")
    ax.plot(epochs, [e.l_fc for e in log], label="focal")
    ax.plot(epochs, [e.total for e in log], label="total", linewidth=2, color="black")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)


def fig_method_trend(rows: list[dict], path: str | Path) -> None:
    """Bar chart of abundance MSE and kappa per method."""
    methods = [r["method"] for r in rows]
    xs = np.arange(len(methods))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax1.bar(xs, [r["mse_avg"] for r in rows], color="tab:blue")
    ax1.set_xticks(xs, methods, rotation=20, fontsize=8)
    ax1.set_ylabel("abundance MSE")
    ax1.set_yscale("log")
    ax2.bar(xs - 0.2, [r["binary_kappa"] for r in rows], width=0.4, label="binary")
    ax2.bar(xs + 0.2, [r["multi_kappa"] for r in rows], width=0.4, label="multiclass")
    ax2.set_xticks(xs, methods, rotation=20, fontsize=8)
    ax2.set_ylabel("kappa")
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)
