"""PNG figures for the report commands.

Figures are built on the Agg canvas without pyplot, so nothing depends on an
interactive backend, and PNG metadata is stripped so reruns are byte-identical.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

PNG_META = {"Software": None}
DPI = 100


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.savefig(path, format="png", dpi=DPI, metadata=PNG_META)
    return path


def plot_panel(original, heat, modified, path, title: str = "") -> Path:
    """Original log-mel, heat map and modified log-mel stacked top to bottom."""
    original = np.asarray(getattr(original, "values", original))
    modified = np.asarray(getattr(modified, "values", modified))
    heat = np.asarray(getattr(heat, "values", heat))[: original.shape[0]]
    lo = min(float(original.min()), float(modified.min()))
    hi = float(original.max())
    fig = Figure(figsize=(7, 7))
    axes = fig.subplots(3, 1, sharex=True)
    rows = ((original, "original", "magma", lo, hi), (heat, "heat map", "jet", 0.0, 1.0),
            (modified, "modified", "magma", lo, hi))
    for ax, (m, name, cmap, vmin, vmax) in zip(axes, rows):
        im = ax.imshow(m, origin="lower", aspect="auto", cmap=cmap, vmin=vmin, vmax=vmax,
                       interpolation="nearest")
        ax.set_ylabel(f"{name}\nmel bin")
        fig.colorbar(im, ax=ax)
    axes[-1].set_xlabel("frame")
    if title:
        axes[0].set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_training(report, path) -> Path:
    """Training loss and validation accuracy per epoch."""
    epochs = np.arange(len(report.train_loss))
    fig = Figure(figsize=(6, 3.5))
    ax = fig.subplots()
    ax.plot(epochs, report.train_loss, "o-", color="tab:blue", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("BCE loss")
    acc = np.asarray(report.val_acc, dtype=float)
    if np.any(np.isfinite(acc)):
        ax2 = ax.twinx()
        ax2.plot(epochs, acc, "s--", color="tab:orange", label="val accuracy")
        ax2.set_ylim(-0.02, 1.02)
        ax2.set_ylabel("val accuracy")
    if report.best_epoch >= 0:
        ax.axvline(report.best_epoch, color="grey", lw=0.8, ls=":")
    fig.tight_layout()
    return _save(fig, path)


def plot_confusion(cm, path, title: str = "") -> Path:
    """2x2 confusion matrix, patient as the positive class."""
    grid = np.array([[cm.tp, cm.fn], [cm.fp, cm.tn]])
    fig = Figure(figsize=(3.6, 3.2))
    ax = fig.subplots()
    ax.imshow(grid, cmap="Blues", vmin=0, vmax=max(int(grid.max()), 1))
    for (i, j), v in np.ndenumerate(grid):
        ax.text(j, i, str(v), ha="center", va="center",
                color="white" if v > grid.max() / 2 else "black")
    ax.set_xticks([0, 1], ["patient", "control"])
    ax.set_yticks([0, 1], ["patient", "control"])
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title or f"accuracy {100 * cm.accuracy:.2f}%")
    fig.tight_layout()
    return _save(fig, path)


def plot_probe(reports, path) -> Path:
    """Accuracy drop on the noise-swapped split per seed and arm."""
    seeds = [r.seed for r in reports]
    x = np.arange(len(seeds))
    fig = Figure(figsize=(5, 3.5))
    ax = fig.subplots()
    for k, (inject, name) in enumerate(((False, "injection off"), (True, "injection on"))):
        drops = [100 * r.arm(inject).drop if any(a.with_injection == inject for a in r.arms)
                 else np.nan for r in reports]
        ax.bar(x + (k - 0.5) * 0.38, drops, 0.38, label=name)
    ax.set_xticks(x, [str(s) for s in seeds])
    ax.set_xlabel("seed")
    ax.set_ylabel("accuracy drop (points)")
    ax.axhline(0, color="black", lw=0.6)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)
