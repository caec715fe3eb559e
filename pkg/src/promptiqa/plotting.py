"""Static report figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (4.5, 4.0),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.bbox": "tight",
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no Software tag so re-rendered PNGs stay byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def scatter(pred: Sequence[float], mos: Sequence[float], path: str | Path, title: str = "",
            srcc: float | None = None, plcc: float | None = None) -> Path:
    pred, mos = np.asarray(pred, float), np.asarray(mos, float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.scatter(mos, pred, s=10, alpha=0.6, edgecolors="none")
        if mos.size > 1 and np.ptp(mos) > 0:
            slope, intercept = np.polyfit(mos, pred, 1)
            xs = np.array([mos.min(), mos.max()])
            ax.plot(xs, slope * xs + intercept, color="C3", lw=1)
        ax.set_xlabel("MOS (normalized)")
        ax.set_ylabel("predicted quality")
        label = title
        if srcc is not None and plcc is not None:
            label = f"{title}\nSRCC {srcc:.4f}  PLCC {plcc:.4f}".strip()
        ax.set_title(label)
        return _save(fig, path)


def ablation_bars(labels: Sequence[str], srcc: Sequence[float], plcc: Sequence[float],
                  path: str | Path, title: str = "") -> Path:
    x = np.arange(len(labels))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.5, 1.2 * len(labels) + 1.5), 3.5))
        ax.bar(x - 0.2, srcc, width=0.4, label="SRCC")
        ax.bar(x + 0.2, plcc, width=0.4, label="PLCC")
        ax.set_xticks(x, labels, rotation=20, ha="right")
        finite = [v for v in (*srcc, *plcc) if np.isfinite(v)]
        if finite:
            ax.set_ylim(min(0.0, min(finite)) - 0.05, 1.0)
        ax.legend(frameon=False)
        ax.set_title(title)
        return _save(fig, path)


def training_curves(histories: Sequence[Sequence[dict]], path: str | Path, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_srcc) = plt.subplots(1, 2, figsize=(8, 3.2))
        for i, hist in enumerate(histories):
            epochs = [row["epoch"] for row in hist]
            ax_loss.plot(epochs, [row["train_mae"] for row in hist], lw=0.8, label=f"rep {i}")
            ax_srcc.plot(epochs, [row["val_srcc"] for row in hist], lw=0.8)
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("train MAE")
        ax_srcc.set_xlabel("epoch")
        ax_srcc.set_ylabel("validation SRCC")
        if len(histories) <= 10:
            ax_loss.legend(frameon=False, fontsize=7)
        fig.suptitle(title)
        return _save(fig, path)
