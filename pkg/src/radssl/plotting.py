"""Plot data (delimited x/y columns) and the matching PNG renders.

The CSV is the record; the PNG is a convenience view of the same numbers.
Figures are built on a bare :class:`matplotlib.figure.Figure`, so no
global backend or pyplot state is touched.
"""

from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Sequence

from matplotlib.figure import Figure

PLOT_COLUMNS = ("x", "y", "y_sd")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_plot_data(path: str | os.PathLike, rows: Sequence[tuple], delimiter: str = ",") -> Path:
    """Write ``(x, y, y_sd)`` rows with a fixed header."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(PLOT_COLUMNS)
        for x, y, sd in rows:
            w.writerow([_fmt(x), _fmt(float(y)), _fmt(float(sd))])
    return path


def read_plot_data(path: str | os.PathLike, delimiter: str = ",") -> tuple[list[str], list[float], list[float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    if not rows or tuple(rows[0]) != PLOT_COLUMNS:
        raise ValueError(f"{path}: expected header {','.join(PLOT_COLUMNS)}")
    xs = [r[0] for r in rows[1:]]
    return xs, [float(r[1]) for r in rows[1:]], [float(r[2]) for r in rows[1:]]


def _numeric(xs: Sequence[str]) -> bool:
    try:
        [float(x) for x in xs]
    except ValueError:
        return False
    return True


def render(data_path: str | os.PathLike, png_path: str | os.PathLike | None = None, *, xlabel: str = "x",
           ylabel: str = "y", title: str = "", delimiter: str = ",") -> Path:
    """Line plot with an SD band for numeric x, bar chart with error bars otherwise."""
    data_path = Path(data_path)
    png_path = Path(png_path) if png_path is not None else data_path.with_suffix(".png")
    xs, ys, sds = read_plot_data(data_path, delimiter)
    fig = Figure(figsize=(4.5, 3.2), dpi=120)
    ax = fig.add_subplot(1, 1, 1)
    if _numeric(xs):
        x = [float(v) for v in xs]
        ax.plot(x, ys, marker="o", color="C0")
        ax.fill_between(x, [y - s for y, s in zip(ys, sds)], [y + s for y, s in zip(ys, sds)], color="C0", alpha=0.2)
    else:
        ax.bar(range(len(xs)), ys, yerr=sds, color="C0", alpha=0.8, capsize=3)
        ax.set_xticks(range(len(xs)))
        ax.set_xticklabels(xs)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    # no Software/date chunks, so identical data renders identical bytes
    fig.savefig(png_path, format="png", metadata={"Software": None})
    return png_path
