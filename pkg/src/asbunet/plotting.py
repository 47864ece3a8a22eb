"""Report figures rendered headless to files (PNG or SVG by extension)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 120,
    "svg.hashsalt": "asbunet",  # stable element ids so SVG output is reproducible
}


def _save(fig, path) -> Path:
    path = Path(path)
    fmt = path.suffix.lstrip(".").lower() or "png"
    if fmt not in ("png", "svg"):
        plt.close(fig)
        raise ValueError(f"figure format must be png or svg, got {path.suffix!r}")
    # fixed metadata keeps repeated runs byte-identical
    meta = {"Software": None} if fmt == "png" else {"Date": None, "Creator": None}
    fig.savefig(path, format=fmt, metadata=meta)
    plt.close(fig)
    return path


def plot_rf_growth(trace, path, report=None, title=None) -> Path:
    """Cumulative receptive field against layer depth, with stage boundaries marked."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.4, 3.6))
        depth = np.arange(1, len(trace) + 1)
        rf = [row.receptive_field for row in trace]
        ax.plot(depth, rf, marker="o", ms=3, lw=1.2, color="C0")
        pools = [i + 1 for i, row in enumerate(trace) if row.name.startswith("pool")]
        for d in pools:
            ax.axvline(d, color="0.6", lw=0.8, ls=":")
        ax.set_xlabel("layer depth")
        ax.set_ylabel("receptive field (px)")
        if report is not None:
            label = "near-linear" if report.near_linear else "non-linear"
            ax.text(0.02, 0.95, f"{label}: max ratio {report.max_ratio:.2f}, spread {report.spread:.2f}",
                    transform=ax.transAxes, va="top")
        ax.set_title(title or "receptive field growth")
        fig.tight_layout()
        return _save(fig, path)


def plot_loss_curve(history, path, smooth: int = 25) -> Path:
    """Per-step loss (thin), running mean and per-epoch means, on a log scale."""
    steps = np.array([h[0] for h in history])
    loss = np.array([h[2] for h in history])
    epochs = np.array([h[3] for h in history])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.4, 3.6))
        ax.plot(steps, loss, lw=0.5, color="0.7", label="step")
        if len(loss) >= smooth > 1:
            kernel = np.ones(smooth) / smooth
            ax.plot(steps[smooth - 1:], np.convolve(loss, kernel, mode="valid"), lw=1.2,
                    color="C0", label=f"mean of {smooth}")
        ends = [steps[epochs == e].max() for e in np.unique(epochs)]
        means = [loss[epochs == e].mean() for e in np.unique(epochs)]
        ax.plot(ends, means, "s", ms=4, color="C3", label="epoch mean")
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("weighted BCE")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_score_histogram(report, path) -> Path:
    """Distribution of per-image ignore-band scores."""
    scores = np.asarray(report.scores, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.2, 3.4))
        lo = min(0.0, float(scores.min())) if scores.size else 0.0
        ax.hist(scores, bins=np.linspace(lo, 1.0, 21), color="C0", edgecolor="white")
        ax.axvline(report.mean_score, color="C3", lw=1.2, label=f"mean {report.mean_score:.3f}")
        ax.set_xlabel("ignore-band score")
        ax.set_ylabel("images")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
