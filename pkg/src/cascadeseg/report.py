"""Figure rendering for run outputs (loss curves, metric charts, sample panels).

Figures are written next to the delimited outputs they visualize; the CSV
files remain the canonical artifacts. All rendering uses the Agg backend so
commands work headless.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

_DPI = 150


def _read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def save_loss_curves(log_csv, out_png) -> None:
    header, rows = _read_csv(log_csv)
    if not rows:
        return
    data = np.array([[float(v) for v in row] for row in rows])
    steps = data[:, 0]
    fig, ax = plt.subplots(figsize=(7, 4))
    for col in range(1, len(header)):
        style = {"lw": 2.0} if header[col] == "total_loss" else {"lw": 1.0, "alpha": 0.7}
        ax.plot(steps, data[:, col], label=header[col], **style)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=_DPI)
    plt.close(fig)


def _grouped_bars(ax, models, class_ids, values, ylabel):
    width = 0.8 / max(len(models), 1)
    xs = np.arange(len(class_ids))
    for mi, model in enumerate(models):
        ax.bar(xs + mi * width, values[mi], width, label=model)
    ax.set_xticks(xs + width * (len(models) - 1) / 2)
    ax.set_xticklabels([f"class {c}" for c in class_ids])
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7)
    ax.grid(True, axis="y", alpha=0.3)


def save_metrics_chart(metrics_csv, out_png) -> None:
    """Grouped Dice bars per model and class from a metrics/ablation CSV."""
    header, rows = _read_csv(metrics_csv)
    if not rows:
        return
    col = {name: i for i, name in enumerate(header)}
    models = list(dict.fromkeys(row[col["model"]] for row in rows))
    class_ids = sorted({int(row[col["class"]]) for row in rows})
    values = np.zeros((len(models), len(class_ids)))
    for row in rows:
        mi = models.index(row[col["model"]])
        ci = class_ids.index(int(row[col["class"]]))
        values[mi, ci] = float(row[col["dice"]])
    fig, ax = plt.subplots(figsize=(7, 4))
    _grouped_bars(ax, models, class_ids, values, "Dice")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(out_png, dpi=_DPI)
    plt.close(fig)


def _to_2d(plane: np.ndarray) -> np.ndarray:
    if plane.ndim == 3:  # show the middle slice of a volume
        return plane[plane.shape[0] // 2]
    return plane


def save_prediction_panel(image, gt, pred, out_png) -> None:
    """Side-by-side input / ground truth / prediction panel."""
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    panels = [(_to_2d(np.asarray(image)), "input", "gray", None),
              (_to_2d(np.asarray(gt)), "ground truth", "viridis", None),
              (_to_2d(np.asarray(pred)), "prediction", "viridis", None)]
    vmax = max(int(np.max(gt)), int(np.max(pred)), 1)
    for ax, (plane, title, cmap, _) in zip(axes, panels):
        kwargs = {} if title == "input" else {"vmin": 0, "vmax": vmax}
        ax.imshow(plane, cmap=cmap, interpolation="nearest", **kwargs)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_png, dpi=_DPI)
    plt.close(fig)
