"""Static figures for reports: mask heatmaps, loss curves, variant bar charts.

Everything goes through ``matplotlib.figure.Figure`` with the Agg canvas so
no global pyplot state is touched and runs are safe without a display.
"""
from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from PIL import Image

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
}
CMAP = "viridis"
# png metadata off so identical figures give identical bytes
PNG_META = {"Software": None}


def mask_to_uint8(mask) -> np.ndarray:
    """Scale a mask in [0, 1] to 8-bit intensities: ``round(M * 255)``."""
    m = np.asarray(mask, dtype=np.float64)
    if m.size and (m.min() < 0 or m.max() > 1):
        raise ValueError("mask values must lie in [0, 1]")
    return np.rint(m * 255).astype(np.uint8)


def save_mask_png(mask, path):
    """One grayscale pixel per feature cell."""
    Image.fromarray(mask_to_uint8(mask), mode="L").save(path, format="PNG")


def _new_figure(width, height):
    import matplotlib

    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(width, height), dpi=100)
        FigureCanvasAgg(fig)
    return fig


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=PNG_META)


def mask_figure(images, teacher_masks, student_masks=None, path="masks.png", titles=None):
    """Rows of input image / teacher mask / student mask in false color.

    ``images`` are ``[3, S, S]`` floats in [0, 1]; masks are ``[H, W]`` feature-grid
    maps, drawn over the full image extent with nearest-neighbour upsampling.
    """
    n = len(images)
    cols = 3 if student_masks is not None else 2
    fig = _new_figure(2.2 * cols, 2.2 * n)
    for r in range(n):
        img = np.transpose(np.asarray(images[r]), (1, 2, 0))
        size = img.shape[0]
        panels = [("image", None), ("teacher mask", teacher_masks[r])]
        if student_masks is not None:
            panels.append(("student mask", student_masks[r]))
        for c, (label, m) in enumerate(panels):
            ax = fig.add_subplot(n, cols, r * cols + c + 1)
            if m is None:
                ax.imshow(img)
            else:
                im = ax.imshow(np.asarray(m), cmap=CMAP, vmin=0, vmax=1, extent=(0, size, size, 0),
                               interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(label)
            if c == 0 and titles:
                ax.set_ylabel(titles[r])
    fig.colorbar(im, ax=fig.axes, shrink=0.6, label="mask value")
    _save(fig, path)


def loss_figure(record, path, names=("task", "distill", "total")):
    fig = _new_figure(5, 3)
    ax = fig.add_subplot(1, 1, 1)
    for name in names:
        curve = record.curve(name)
        if curve.size:
            ax.plot(np.arange(curve.size), curve, label=name, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def summary_bar_chart(summary: dict, path, metric="map", title=None):
    """Bars of mean metric with std error bars; ``summary`` maps label tuple -> (mean, std, n)."""
    labels = [" / ".join(str(x) for x in k) for k in summary]
    means = np.array([v[0] for v in summary.values()])
    stds = np.array([v[1] for v in summary.values()])
    fig = _new_figure(max(3.0, 0.9 * len(labels) + 1.5), 3)
    ax = fig.add_subplot(1, 1, 1)
    ax.bar(np.arange(len(labels)), means, yerr=stds, capsize=3, color="0.55")
    ax.set_xticks(np.arange(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(f"toy {metric}")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
