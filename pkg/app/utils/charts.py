"""Heatmaps and line charts for result grids, rendered with matplotlib and
written as SVG."""
import io
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import TwoSlopeNorm  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

# red for positive scores, blue for negative
CMAP = "RdBu_r"
LABEL_SIZE = 7


def _label(text: str) -> str:
    # token strings may contain "$", which matplotlib would read as mathtext
    return str(text).replace("$", r"\$")


def diverging_norm(values) -> TwoSlopeNorm:
    """Color scale symmetric around 0 so white always means no effect."""
    values = np.asarray(values, dtype=np.float64)
    limit = float(np.max(np.abs(values))) if values.size else 0.0
    if not np.isfinite(limit) or limit == 0.0:
        limit = 1.0
    return TwoSlopeNorm(vmin=-limit, vcenter=0.0, vmax=limit)


def heatmap(matrix: Sequence[Sequence[float]], row_labels: Sequence[str], col_labels: Sequence[str],
            title: str, row_axis: str = "", col_axis: str = "") -> Figure:
    values = np.asarray(matrix, dtype=np.float64)
    n_rows, n_cols = values.shape
    fig, ax = plt.subplots(figsize=(max(4.0, 0.3 * n_cols + 2.5), max(3.0, 0.3 * n_rows + 1.5)))
    image = ax.imshow(values, cmap=CMAP, norm=diverging_norm(values), aspect="auto", interpolation="nearest")
    fig.colorbar(image, ax=ax)
    ax.set_xticks(range(n_cols), labels=[_label(c) for c in col_labels],
                  rotation=60, ha="right", fontsize=LABEL_SIZE)
    ax.set_yticks(range(n_rows), labels=[_label(r) for r in row_labels], fontsize=LABEL_SIZE)
    ax.set_title(_label(title))
    ax.set_xlabel(col_axis)
    ax.set_ylabel(row_axis)
    fig.tight_layout()
    return fig


def line_chart(labels: Sequence[str], values: Sequence[float], title: str,
               footer: Optional[str] = None) -> Figure:
    """Values against categorical x ticks, with a dashed zero line."""
    fig, ax = plt.subplots(figsize=(max(5.0, 0.3 * len(labels) + 2.0), 3.5))
    ax.plot(range(len(values)), values, marker="o", markersize=3)
    ax.axhline(0.0, color="grey", linestyle="--", linewidth=0.8)
    ax.set_xticks(range(len(labels)), labels=[_label(lb) for lb in labels],
                  rotation=60, ha="right", fontsize=LABEL_SIZE)
    ax.set_title(_label(title))
    if footer:
        fig.text(0.01, 0.01, _label(footer), fontsize=8)
        fig.tight_layout(rect=(0.0, 0.05, 1.0, 1.0))
    else:
        fig.tight_layout()
    return fig


def to_svg(fig: Figure) -> str:
    """SVG text of ``fig`` with labels kept as text; the figure is closed."""
    buffer = io.BytesIO()
    try:
        with plt.rc_context({"svg.fonttype": "none", "svg.hashsalt": "interp-workbench"}):
            fig.savefig(buffer, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    return buffer.getvalue().decode("utf-8")
