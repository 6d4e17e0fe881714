"""Render dice reports as a fixed-layout text table, CSV, and plots.

The text table mirrors the five-row results layout: three stand-alone
models, the ensemble, and the distilled student, one column per region.
Per-column optima among the stand-alone rows are wrapped in underscores,
global optima in asterisks; ties share the marking.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .preprocess import REGION_NAMES

ROW_ORDER = ("UNet", "Residual UNet", "Cascaded UNet", "Ensemble", "Distilled Model")
STANDALONE_ROWS = ROW_ORDER[:3]

_KIND_TO_ROW = {
    "unet3d": "UNet",
    "residual_unet3d": "Residual UNet",
    "cascaded_unet3d": "Cascaded UNet",
}

GAP = "-"


def rows_from_manifest(manifest: dict) -> dict[str, dict[str, Optional[float]]]:
    """Extract {row -> {region -> score or None}} from a (possibly partial) manifest."""
    rows: dict[str, dict[str, Optional[float]]] = {
        name: {region: None for region in REGION_NAMES} for name in ROW_ORDER
    }

    def fill(row_name: str, report: Optional[dict]) -> None:
        if report:
            for region in REGION_NAMES:
                rows[row_name][region] = float(report["per_region"][region])

    for kind, entry in manifest.get("models", {}).items():
        if kind in _KIND_TO_ROW:
            fill(_KIND_TO_ROW[kind], entry.get("report"))
    if "ensemble" in manifest:
        fill("Ensemble", manifest["ensemble"].get("report"))
    if "student" in manifest:
        fill("Distilled Model", manifest["student"].get("report"))
    return rows


def table_markings(
    rows: dict[str, dict[str, Optional[float]]]
) -> dict[tuple[str, str], dict[str, bool]]:
    """Per-cell optimum flags. Ties are inclusive: every cell at the max is marked."""
    markings = {}
    for region in REGION_NAMES:
        standalone = [
            rows[name][region] for name in STANDALONE_ROWS if rows[name][region] is not None
        ]
        overall = [rows[name][region] for name in ROW_ORDER if rows[name][region] is not None]
        best_standalone = max(standalone) if standalone else None
        best_overall = max(overall) if overall else None
        for name in ROW_ORDER:
            value = rows[name][region]
            markings[(name, region)] = {
                "standalone_opt": (
                    value is not None
                    and name in STANDALONE_ROWS
                    and best_standalone is not None
                    and value >= best_standalone
                ),
                "global_opt": (
                    value is not None and best_overall is not None and value >= best_overall
                ),
            }
    return markings


def _cell(value: Optional[float], marks: dict[str, bool]) -> str:
    if value is None:
        return GAP
    text = f"{value:.5f}"
    if marks["standalone_opt"]:
        text = f"_{text}_"
    if marks["global_opt"]:
        text = f"*{text}*"
    return text


def emit_table(manifest: dict) -> str:
    """Fixed-point 5-decimal table; missing reports render as gaps."""
    rows = rows_from_manifest(manifest)
    markings = table_markings(rows)
    header = ["Approach"] + list(REGION_NAMES)
    body = []
    for name in ROW_ORDER:
        body.append(
            [name] + [_cell(rows[name][region], markings[(name, region)]) for region in REGION_NAMES]
        )
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
    lines = []
    lines.append(" | ".join(h.ljust(w) for h, w in zip(header, widths)))
    lines.append("-+-".join("-" * w for w in widths))
    for line in body:
        lines.append(" | ".join(c.ljust(w) for c, w in zip(line, widths)))
    legend = "_x_ = best stand-alone model per region; *x* = best overall per region"
    return "\n".join(lines) + "\n\n" + legend + "\n"


def emit_csv(manifest: dict) -> str:
    rows = rows_from_manifest(manifest)
    lines = ["approach," + ",".join(REGION_NAMES)]
    for name in ROW_ORDER:
        cells = [
            f"{rows[name][region]:.5f}" if rows[name][region] is not None else ""
            for region in REGION_NAMES
        ]
        lines.append(",".join([name] + cells))
    return "\n".join(lines) + "\n"


def _plot_history(history_path: Path, title: str, out_path: Path) -> None:
    history = json.loads(Path(history_path).read_text())
    epochs = [r["epoch"] for r in history["epochs"]]
    total = [r["loss"]["total"] for r in history["epochs"]]
    dice = [r["loss"]["dice_similarity"] for r in history["epochs"]]
    val_points = [
        (r["epoch"], r["val_report"]["mean"])
        for r in history["epochs"]
        if r.get("val_report")
    ]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, total, marker="o", markersize=3, label="total loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax2.plot(epochs, dice, marker="o", markersize=3, label="train dice")
    if val_points:
        ax2.plot(*zip(*val_points), marker="s", markersize=3, label="val dice (mean)")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("dice")
    ax2.set_ylim(0, 1.05)
    ax2.legend()
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def emit_plots(manifest: dict, out_dir) -> list[Path]:
    """Per-model training curves plus a region-wise comparison bar chart."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for kind, entry in manifest.get("models", {}).items():
        history = entry.get("history")
        if history and Path(history).exists():
            path = out_dir / f"curves_{kind}.png"
            _plot_history(history, _KIND_TO_ROW.get(kind, kind), path)
            written.append(path)

    rows = rows_from_manifest(manifest)
    present = [name for name in ROW_ORDER if any(v is not None for v in rows[name].values())]
    if present:
        fig, ax = plt.subplots(figsize=(8, 4))
        width = 0.8 / len(present)
        for i, name in enumerate(present):
            values = [rows[name][region] or 0.0 for region in REGION_NAMES]
            positions = [j + i * width for j in range(len(REGION_NAMES))]
            ax.bar(positions, values, width=width, label=name)
        ax.set_xticks([j + 0.4 - width / 2 for j in range(len(REGION_NAMES))])
        ax.set_xticklabels(REGION_NAMES)
        ax.set_ylabel("dice")
        ax.set_ylim(0, 1.05)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / "report_comparison.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    return written
