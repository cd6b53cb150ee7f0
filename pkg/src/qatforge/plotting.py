"""Report figures. Everything renders off-screen with the Agg canvas."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .harness import SWEEP_LABELS, ResultRow

STYLE = {
    "dpi": 120,
    "width": 6.4,
    "height": 3.6,
}


def _new(ncols: int = 1, width_scale: float = 1.0):
    fig = Figure(figsize=(STYLE["width"] * width_scale, STYLE["height"]), dpi=STYLE["dpi"])
    FigureCanvasAgg(fig)
    axes = fig.subplots(1, ncols)
    return fig, np.atleast_1d(axes)


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    return path


def sweep_figure(rows: Sequence[ResultRow], path) -> Path:
    """Eval accuracy (mean over seeds, min/max whiskers) and size per config."""
    models = list(dict.fromkeys(r.model for r in rows))
    labels = [l for l in SWEEP_LABELS if any(r.label == l for r in rows)]
    labels += [l for l in dict.fromkeys(r.label for r in rows) if l not in labels]
    fig, (ax_acc, ax_size) = _new(2, width_scale=1.6)
    x = np.arange(len(labels))
    width = 0.8 / max(1, len(models))
    for i, m in enumerate(models):
        mean, lo, hi, size = [], [], [], []
        for l in labels:
            acc = [r.eval_accuracy for r in rows if r.model == m and r.label == l and not r.error]
            b = [r.model_bytes for r in rows if r.model == m and r.label == l and not r.error]
            a = np.array(acc) if acc else np.array([np.nan])
            mean.append(np.mean(a))
            lo.append(np.mean(a) - np.min(a))
            hi.append(np.max(a) - np.mean(a))
            size.append(b[0] if b else np.nan)
        off = x + (i - (len(models) - 1) / 2) * width
        ax_acc.bar(off, mean, width, yerr=[lo, hi], capsize=2, label=m)
        ax_size.bar(off, np.array(size) / 1e3, width, label=m)
    for ax in (ax_acc, ax_size):
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=45, ha="right")
    ax_size.legend(frameon=False)
    finite = [r.eval_accuracy for r in rows if np.isfinite(r.eval_accuracy)]
    if finite:
        ax_acc.set_ylim(max(0.0, min(finite) - 0.05), min(1.0, max(finite) + 0.02))
    ax_acc.set_ylabel("eval accuracy")
    ax_size.set_ylabel("payload (kB)")
    return _save(fig, path)


def loss_figure(losses: Sequence[float], path, title: str = "") -> Path:
    fig, (ax,) = _new()
    ax.plot(np.arange(len(losses)), losses, lw=0.6, alpha=0.5, label="step")
    if len(losses) >= 20:
        k = max(5, len(losses) // 50)
        smooth = np.convolve(losses, np.ones(k) / k, mode="valid")
        ax.plot(np.arange(k - 1, len(losses)), smooth, lw=1.5, label=f"mean of {k}")
    ax.set_xlabel("step")
    ax.set_ylabel("train loss")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    return _save(fig, path)


def bench_figure(rows: Sequence[dict], path) -> Path:
    fig, (ax,) = _new()
    names = [r["path"] for r in rows]
    ax.bar(names, [r["median_ms"] for r in rows], color="0.6")
    for i, r in enumerate(rows):
        ax.annotate(f"{r['ratio_vs_float']:.2f}x", (i, r["median_ms"]), ha="center", va="bottom")
    ax.set_ylabel("median ms / step")
    return _save(fig, path)

