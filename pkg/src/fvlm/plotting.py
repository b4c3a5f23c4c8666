"""Matplotlib figures for the report path (files only, Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from fvlm.evaluation import MetricReport, ScoreTable  # noqa: E402


def roc_points(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-scores, kind="mergesort")
    y = labels[order].astype(bool)
    tpr = np.concatenate([[0.0], np.cumsum(y) / max(y.sum(), 1)])
    fpr = np.concatenate([[0.0], np.cumsum(~y) / max((~y).sum(), 1)])
    return fpr, tpr


def plot_roc(table: ScoreTable, report: MetricReport, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 5))
    for abn in table.abnormalities():
        s, y = table.column(abn)
        if y.min(initial=1) == y.max(initial=0):
            continue
        fpr, tpr = roc_points(s, y)
        auc = report.per_abnormality[abn].auc
        ax.plot(fpr, tpr, lw=1.2, label=f"{abn} ({auc:.2f})")
    ax.plot([0, 1], [0, 1], ls=":", c="grey")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(fontsize=6, loc="lower right")
    return _save(fig, path)


def plot_auc_bars(results: dict[str, Sequence[float]], path: str | Path, title: str = "") -> Path:
    """Mean AUC per run label with per-seed points."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = list(results)
    for i, name in enumerate(names):
        vals = np.asarray(results[name], dtype=float)
        ax.bar(i, vals.mean(), color="#8fb3d9")
        ax.scatter(np.full(vals.size, i), vals, c="k", s=10, zorder=3)
    ax.set_xticks(range(len(names)), names, rotation=20, fontsize=8)
    ax.axhline(0.5, ls=":", c="grey")
    ax.set_ylabel("mean zero-shot AUC")
    ax.set_title(title, fontsize=9)
    return _save(fig, path)


def plot_training_log(rows: Sequence[dict], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for mid in sorted({r["model_id"] for r in rows}):
        it = [r["iter"] for r in rows if r["model_id"] == mid]
        loss = np.array([r["loss"] for r in rows if r["model_id"] == mid])
        k = max(1, len(loss) // 50)
        smooth = np.convolve(loss, np.ones(k) / k, mode="valid")
        ax.plot(it[k - 1 :], smooth, lw=1, label=f"model {mid}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("contrastive loss")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_heatmap(sim: np.ndarray, grid: tuple[int, int, int], path: str | Path, title: str = "") -> Path:
    vol = np.asarray(sim).reshape(grid)
    fig, axes = plt.subplots(1, grid[0], figsize=(2.2 * grid[0], 2.4), squeeze=False)
    for z, ax in enumerate(axes[0]):
        im = ax.imshow(vol[z], vmin=-1, vmax=1, cmap="coolwarm")
        ax.set_title(f"z={z}", fontsize=7)
        ax.axis("off")
    fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8)
    fig.suptitle(title, fontsize=8)
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path
