from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, List

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from randomhorizons import settings  # noqa: E402

from ..models import ConfigurationError  # noqa: E402
from ..utils import moving_average, parse_csv_bytes  # noqa: E402

logger = logging.getLogger(__name__)

PLOT_KINDS = ("return", "effective_lr", "return_time", "occupancy")

# Fixed SVG ids and no timestamp, so the same CSV always gives the same file.
matplotlib.rcParams["svg.hashsalt"] = "randomhorizons"
SVG_METADATA = {"Date": None}


def _column(rows: List[Dict[str, Any]], name: str) -> np.ndarray:
    return np.array([r[name] for r in rows], dtype=float)


def _line_with_average(ax, x: np.ndarray, y: np.ndarray, label: str) -> None:
    """Raw series faded, moving average on top."""
    marker = "o" if len(x) == 1 else None
    ax.plot(x, y, color="tab:blue", alpha=0.3, linewidth=0.8, marker=marker, label=label)
    ax.plot(x, moving_average(y, settings.SMOOTHING_WINDOW), color="tab:blue", linewidth=1.5,
            marker=marker, label=f"moving average ({settings.SMOOTHING_WINDOW})")


def _log_if_positive(ax, y: np.ndarray) -> None:
    if np.all(y > 0):
        ax.set_yscale("log")


def _plot_return(ax, rows: List[Dict[str, Any]]) -> None:
    neg_return = -_column(rows, "mean_return")
    _line_with_average(ax, _column(rows, "iter"), neg_return, "negative expected return")
    _log_if_positive(ax, neg_return)
    ax.set_xlabel("gradient step")
    ax.set_ylabel("negative expected return")


def _plot_effective_lr(ax, rows: List[Dict[str, Any]]) -> None:
    lr = _column(rows, "effective_lr")
    _line_with_average(ax, _column(rows, "iter"), lr, "effective learning rate")
    _log_if_positive(ax, lr)
    ax.set_xlabel("gradient step")
    ax.set_ylabel("effective learning rate")


def _plot_return_time(ax, rows: List[Dict[str, Any]]) -> None:
    neg_return = -_column(rows, "mean_return")
    _line_with_average(ax, _column(rows, "wall_time_s"), neg_return, "negative expected return")
    _log_if_positive(ax, neg_return)
    ax.set_xlabel("wall time [s]")
    ax.set_ylabel("negative expected return")


def _plot_occupancy(ax, rows: List[Dict[str, Any]]) -> None:
    n_rows = max(r["row"] for r in rows) + 1
    n_cols = max(r["col"] for r in rows) + 1
    density = np.zeros((n_rows, n_cols))
    x_edges = np.zeros(n_rows + 1)
    y_edges = np.zeros(n_cols + 1)
    for r in rows:
        i, j = r["row"], r["col"]
        density[i, j] = r["normalized"]
        x_edges[i], x_edges[i + 1] = r["x_low"], r["x_high"]
        y_edges[j], y_edges[j + 1] = r["y_low"], r["y_high"]
    mesh = ax.pcolormesh(x_edges, y_edges, density.T, cmap="viridis", shading="flat")
    ax.figure.colorbar(mesh, ax=ax, label="visit frequency")
    ax.set_xlabel("coordinate 1")
    ax.set_ylabel("coordinate 2")


PLOTTERS = {
    "return": _plot_return,
    "effective_lr": _plot_effective_lr,
    "return_time": _plot_return_time,
    "occupancy": _plot_occupancy,
}


def _plot(input_csv: Path, kind: str, out: Path) -> Path:
    """
    Render a metrics or occupancy CSV as a static SVG.

    Raises:
        ConfigurationError: If `kind` is unknown.
        MalformedCsvError: If the CSV does not follow its frozen schema.
    """
    if kind not in PLOTTERS:
        raise ConfigurationError(f"unknown plot kind {kind!r}; use one of {', '.join(PLOT_KINDS)}.",
                                 "kind")
    rows = parse_csv_bytes(Path(input_csv).read_bytes(),
                           "OCCUPANCY" if kind == "occupancy" else "METRICS")

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    try:
        PLOTTERS[kind](ax, rows)
        if kind != "occupancy":
            ax.legend(loc="best", fontsize="small")
        fig.tight_layout()
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out, format="svg", metadata=SVG_METADATA)
    finally:
        plt.close(fig)
    logger.info("wrote %s plot of %d rows to %s", kind, len(rows), out)
    return out
