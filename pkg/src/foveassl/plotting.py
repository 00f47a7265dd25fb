"""Figures written next to the CSV outputs. Uses the non-interactive Agg backend."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import GazeHistogram  # noqa: E402


def _read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss(loss_csv, path, window: int = 20) -> Path:
    rows = _read_csv(loss_csv)
    step = np.array([int(r["step"]) for r in rows])
    loss = np.array([float(r["loss"]) for r in rows])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(step, loss, lw=0.8, alpha=0.5, label="loss")
    if len(loss) >= window:
        smooth = np.convolve(loss, np.ones(window) / window, mode="valid")
        ax.plot(step[window - 1:], smooth, lw=1.5, label=f"{window}-step mean")
    ax.set_xlabel("step")
    ax.set_ylabel("InfoNCE loss")
    ax.legend()
    return _save(fig, path)


def plot_schedule(schedule_csv, path) -> Path:
    rows = _read_csv(schedule_csv)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([int(r["step"]) for r in rows], [float(r["lr"]) for r in rows])
    ax.set_xlabel("step")
    ax.set_ylabel("learning rate")
    return _save(fig, path)


def plot_gaze_heatmap(hist: GazeHistogram, path) -> Path:
    """Gaze density over the frame with the frame centre marked in red."""
    fig, ax = plt.subplots(figsize=(5, 4.5))
    r = hist.resolution
    im = ax.imshow(hist.counts, origin="upper", extent=(0, r, r, 0), cmap="magma")
    ax.plot(*hist.center, "o", color="red", ms=6, label="frame centre")
    if not hist.empty:
        ax.plot(*hist.mean, "x", color="cyan", ms=8, label="mean gaze")
    ax.set_xlim(0, r)
    ax.set_ylim(r, 0)
    ax.set_xlabel("x (px)")
    ax.set_ylabel("y (px)")
    ax.legend(loc="lower right", fontsize=8)
    fig.colorbar(im, ax=ax, label="count")
    return _save(fig, path)


def plot_sweep(sweep_csv, path) -> Path:
    """Per-group improvement over the baseline value, one bar group per value."""
    rows = [r for r in _read_csv(sweep_csv) if r["group"] and r["improvement"] != "failed"]
    values = list(dict.fromkeys(r["value"] for r in _read_csv(sweep_csv)))
    groups = sorted({r["group"] for r in rows})
    table = defaultdict(dict)
    for r in rows:
        table[r["group"]][r["value"]] = float(r["improvement"])
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(len(values), 1)
    x = np.arange(len(groups))
    for i, v in enumerate(values):
        ax.bar(x + i * width, [table[g].get(v, np.nan) for g in groups], width, label=v)
    ax.axhline(0, color="black", lw=0.8)
    ax.set_xticks(x + width * (len(values) - 1) / 2)
    ax.set_xticklabels(groups)
    axis = rows[0]["axis"] if rows else ""
    ax.set_ylabel("improvement (points)")
    ax.legend(title=axis, fontsize=8)
    return _save(fig, path)


def plot_sensitivity(sensitivity_csv, path) -> Path:
    rows = _read_csv(sensitivity_csv)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = np.arange(len(rows))
    ax.bar(x - 0.2, [float(r["delta_bg"]) for r in rows], 0.4, label="missing background")
    ax.bar(x + 0.2, [float(r["delta_obj"]) for r in rows], 0.4, label="missing object")
    ax.axhline(0, color="black", lw=0.8)
    ax.set_xticks(x)
    ax.set_xticklabels([r["setting"] for r in rows])
    ax.set_ylabel("accuracy change (points)")
    ax.legend(fontsize=8)
    return _save(fig, path)
