"""Delimited report tables and reproducible SVG line charts.

Charts are rendered headless and byte-stable: the SVG id hash salt is pinned
and the date metadata is dropped, so rerunning a report rewrites identical
files.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .evaluate import EvalReport  # noqa: E402

CHART_SALT = "masktab"


def format_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_table(path, rows: list[dict], columns) -> Path:
    """CSV with fixed 6-decimal floats; None renders as an empty cell."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_cell(row.get(c)) for c in columns])
    return path


def render_line_chart(path, x_labels, series: dict, y_label: str, reference=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context({"svg.hashsalt": CHART_SALT}):
        fig, ax = plt.subplots(figsize=(7.0, 4.0))
        xs = range(len(x_labels))
        for name, ys in series.items():
            ax.plot(xs, ys, marker="o", label=name)
        if reference is not None:
            ref_name, ref_value = reference
            ax.axhline(ref_value, linestyle="--", color="gray", label=ref_name)
        ax.set_xticks(list(xs))
        ax.set_xticklabels([str(x) for x in x_labels], rotation=45, ha="right")
        ax.set_ylabel(y_label)
        ax.grid(True, alpha=0.3)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


_SUMMARY_SPLITS = ("train", "monthly_mean", "pooled", "gap")


def write_eval_report(out_dir, report: EvalReport, charts: bool = True) -> list[Path]:
    """report.csv plus one monthly-series chart per metric."""
    out_dir = Path(out_dir)
    files = [write_table(out_dir / "report.csv", report.rows, report.columns)]
    if not charts:
        return files
    month_rows = [r for r in report.rows if r["split"] not in _SUMMARY_SPLITS]
    labels = [r["split"] for r in month_rows]
    train_row = report.row("train")
    for metric in report.metrics:
        files.append(
            render_line_chart(
                out_dir / f"report_{metric}.svg",
                labels,
                {metric: [r[metric] for r in month_rows]},
                metric,
                reference=("train", train_row[metric]),
            )
        )
    return files


def write_ablation_table(out_dir, rows: list[dict]) -> list[Path]:
    return [write_table(Path(out_dir) / "ablation.csv", rows, ("variant", "auc", "ks"))]


def write_sweep_report(out_dir, rows: list[dict], charts: bool = True) -> list[Path]:
    """sweep.csv plus one metric-vs-grid-point chart per metric."""
    out_dir = Path(out_dir)
    files = [write_table(out_dir / "sweep.csv", rows, ("axis", "point", "auc", "ks"))]
    if not charts or not rows:
        return files
    labels = [r["point"] for r in rows]
    for metric in ("auc", "ks"):
        files.append(
            render_line_chart(
                out_dir / f"sweep_{metric}.svg",
                labels,
                {metric: [r[metric] for r in rows]},
                metric,
            )
        )
    return files
