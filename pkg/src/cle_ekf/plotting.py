"""SVG line plots for trajectories, filter output and ensemble metrics."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# One mm in inches.
mm = 0.0393701
PANEL_WIDTH = 90 * mm
PANEL_HEIGHT = 60 * mm

STYLE = {
    "font.family": "serif",
    "font.size": 8,
    "axes.linewidth": 0.6,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 0.8,
    "legend.frameon": False,
    "legend.fontsize": 7,
    # fixed salt and no date stamp keep reruns byte-identical
    "svg.hashsalt": "cle-ekf",
    "svg.fonttype": "path",
}

# Long series are thinned before drawing; the SVG would otherwise carry every point.
MAX_POINTS = 4000


def _thin(t, y):
    stride = max(1, len(t) // MAX_POINTS)
    return t[::stride], y[::stride]


def save_fig(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_series(t, y, path, *, ylabel: str, logy: bool = False, title: str | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(PANEL_WIDTH, PANEL_HEIGHT), layout="constrained")
        ax.plot(*_thin(np.asarray(t), np.asarray(y)), color="k")
        if logy and np.all(np.asarray(y) > 0):
            ax.set_yscale("log")
        ax.set_xlabel("time (s)")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        return save_fig(fig, path)


def plot_states(t, states, names: Sequence[str], path, *, ylabel: str = "value", overlay=None,
                overlay_label: str | None = None) -> Path:
    """One panel per column of ``states``, optionally with a dashed overlay."""
    states = np.atleast_2d(np.asarray(states))
    n = states.shape[1]
    cols = 2 if n > 1 else 1
    rows = -(-n // cols)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(PANEL_WIDTH * cols, PANEL_HEIGHT * rows),
                                 layout="constrained", squeeze=False)
        for i, ax in enumerate(axes.flat):
            if i >= n:
                ax.set_visible(False)
                continue
            ax.plot(*_thin(np.asarray(t), states[:, i]), color="k", label=None)
            if overlay is not None:
                ax.plot(*_thin(np.asarray(t), np.asarray(overlay)[:, i]), "--", color="tab:red",
                        label=overlay_label)
                if overlay_label:
                    ax.legend()
            ax.set_title(names[i])
            ax.set_xlabel("time (s)")
            ax.set_ylabel(ylabel)
        return save_fig(fig, path)


def plot_ensemble(metrics, out_dir, species: Sequence[str] = ()) -> list[Path]:
    """Panels for the mean-square error, ``||P+||`` and ``||Q||`` series."""
    out_dir = Path(out_dir)
    t = metrics.times
    paths = [
        plot_series(t, metrics.mse, out_dir / "mse_norm.svg", ylabel=r"$E\,\|e_k\|^2$"),
        plot_series(t, metrics.p_norm, out_dir / "p_norm.svg", ylabel=r"mean $\|P_k^+\|$"),
        plot_series(t, metrics.q_norm, out_dir / "q_norm.svg", ylabel=r"mean $\|Q_k\|$"),
    ]
    if metrics.first_run_error is not None and species:
        paths.append(plot_states(t, metrics.first_run_error, species, out_dir / "state_errors.svg",
                                 ylabel="filter error"))
    return paths
