"""Result files: every grid and table is written as JSON and as CSV.

JSON carries ``schema_version`` as a field; CSV files start with a
``# schema_version=N`` comment line.
"""
import logging
import os
from typing import Sequence

from matplotlib.figure import Figure

from app.config import settings
from app.models import AttributionGrid, ComponentDominance, HeadComparison, LogitTable, PatchGrid
from app.utils import charts
from app.utils.storage import save_csv, save_json, write_atomic

logger = logging.getLogger(__name__)

LOGIT_COLUMNS = ("prompt", "n_tokens", "prepend_bos", "logit_yes", "logit_no", "p_yes", "p_no",
                 "rank_yes", "rank_no", "logit_diff", "prob_ratio")


def _csv(path: str, header: Sequence[str], rows) -> str:
    return save_csv(path, header, rows, comment=f"schema_version={settings.SCHEMA_VERSION}")


def save_attribution_grid(out_dir: str, stem: str, grid: AttributionGrid) -> list[str]:
    json_path = save_json(os.path.join(out_dir, f"{stem}.json"), grid)
    if grid.shape is not None:
        _, n_cols = grid.shape
        rows = [[str(r), *row] for r, row in enumerate(grid.as_matrix())]
        csv_path = _csv(os.path.join(out_dir, f"{stem}.csv"),
                        ["layer", *[str(c) for c in range(n_cols)]], rows)
        save_json(os.path.join(out_dir, f"{stem}_matrix.json"), {
            "schema_version": grid.schema_version,
            "kind": grid.kind,
            "prompt": grid.prompt,
            "axes": {"layer": [str(r) for r in range(len(rows))], "head": [str(c) for c in range(n_cols)]},
            "values": grid.as_matrix(),
        })
    else:
        csv_path = _csv(os.path.join(out_dir, f"{stem}.csv"), ["label", "value"],
                        zip(grid.labels, grid.values))
    return [json_path, csv_path]


def save_patch_grid(out_dir: str, grid: PatchGrid) -> list[str]:
    stem = f"patch_{grid.name}"
    json_path = save_json(os.path.join(out_dir, f"{stem}.json"), grid)
    rows = [[label, *row] for label, row in zip(grid.axes[grid.row_axis], grid.values)]
    csv_path = _csv(os.path.join(out_dir, f"{stem}.csv"),
                    [grid.row_axis, *grid.axes[grid.col_axis]], rows)
    return [json_path, csv_path]


def save_logit_table(out_dir: str, table: LogitTable, stem: str = "logits") -> list[str]:
    json_path = save_json(os.path.join(out_dir, f"{stem}.json"), table)
    rows = [[getattr(r, c) for c in LOGIT_COLUMNS] for r in table.records]
    logger.info("[results] %s: mean logit diff %.4f, mean prob ratio %.4f",
                stem, table.mean_logit_diff, table.mean_prob_ratio)
    csv_path = _csv(os.path.join(out_dir, f"{stem}.csv"), LOGIT_COLUMNS, rows)
    return [json_path, csv_path]


def save_head_comparison(out_dir: str, comparison: HeadComparison, stem: str) -> str:
    return save_json(os.path.join(out_dir, f"{stem}.json"), comparison)


def save_component_dominance(out_dir: str, report: ComponentDominance) -> str:
    return save_json(os.path.join(out_dir, "component_dominance.json"), report)


def save_svg(out_dir: str, name: str, fig: Figure) -> str:
    return write_atomic(os.path.join(out_dir, f"{name}.svg"), charts.to_svg(fig))


def render_patch_grid(out_dir: str, grid: PatchGrid) -> str:
    title = f"{grid.name} patching ({grid.direction}, {grid.n_pairs} pair(s))"
    return save_svg(out_dir, f"patch_{grid.name}",
                    charts.heatmap(grid.values, grid.axes[grid.row_axis], grid.axes[grid.col_axis],
                                   title, grid.row_axis, grid.col_axis))
