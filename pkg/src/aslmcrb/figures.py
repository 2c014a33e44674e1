"""Deterministic SVG figure rendering for report tables.

Figures are drawn with matplotlib (Agg) and saved as standalone SVG with a
fixed hash salt and no timestamp metadata, so byte-identical inputs give
byte-identical files. Log-scale panels clamp non-positive values to a
floor and record the clamping in an SVG comment node.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .errors import ColumnMissing, IoFailure  # noqa: E402
from .tables import ExperimentTable, column_array  # noqa: E402

_HASH_SALT = "aslmcrb"


@dataclass(frozen=True)
class PlotOptions:
    logy: bool = False
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    dotted: tuple[str, ...] = ()      # columns drawn dotted (reference style)
    ref_line: float | None = None     # horizontal reference, e.g. 1.0
    legend_labels: dict = field(default_factory=dict)


def emit_lineplot_svg(table: ExperimentTable, x_column: str,
                      y_columns: list[str], options: PlotOptions,
                      path) -> None:
    """Render one line per y column against the x column into an SVG file."""
    if len(table.rows) < 2:
        raise ValueError("need at least 2 rows to draw a line plot")
    x = column_array(table, x_column)
    ys = {name: column_array(table, name) for name in y_columns}
    if not y_columns:
        raise ColumnMissing("no y columns given")

    clamped = 0
    floor = None
    if options.logy:
        positives = [v for arr in ys.values() for v in arr
                     if np.isfinite(v) and v > 0.0]
        floor = (min(positives) / 10.0) if positives else 1e-12
        for name, arr in ys.items():
            bad = np.isfinite(arr) & (arr <= 0.0)
            clamped += int(bad.sum())
            arr[bad] = floor

    plt.rcParams["svg.hashsalt"] = _HASH_SALT
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    try:
        for name in y_columns:
            style = ":" if name in options.dotted else "-"
            label = options.legend_labels.get(name, name)
            ax.plot(x, ys[name], linestyle=style, marker=".", label=label)
        if options.ref_line is not None:
            ax.axhline(options.ref_line, color="0.4", linestyle=":",
                       linewidth=1.0, label=f"reference {options.ref_line:g}")
        if options.logy:
            ax.set_yscale("log")
        ax.set_xlabel(options.xlabel or x_column)
        if options.ylabel:
            ax.set_ylabel(options.ylabel)
        if options.title:
            ax.set_title(options.title)
        ax.legend(loc="best", fontsize=9)
        fig.tight_layout()
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(path, format="svg", metadata={"Date": None})
        except OSError as exc:
            raise IoFailure(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)

    if clamped:
        text = path.read_text(encoding="utf-8")
        note = f"<!-- {clamped} non-positive values clamped to {floor:g} for log scale -->\n"
        path.write_text(text.replace("</svg>", note + "</svg>"),
                        encoding="utf-8")
