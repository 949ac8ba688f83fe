"""PNG renderings of the CLI's JSON/CSV outputs (off-screen backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # no timestamp metadata, so reruns write identical bytes
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def training_curves(rows: list[dict], path, metric_name: str = "val accuracy") -> Path:
    epochs = [r["epoch"] for r in rows]
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax_loss.plot(epochs, [r["train_loss"] for r in rows], marker="o", ms=3)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    vals = [r["val_metric"] for r in rows]
    if any(v is not None for v in vals):
        ax_val.plot(epochs, [np.nan if v is None else v for v in vals], marker="o", ms=3, color="C1")
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel(metric_name)
    return _save(fig, path)


def travel_distance(series: dict[str, dict], path, knn_radius: float | None = None) -> Path:
    """Mean distance to the start and to the previous node per step, one line per policy."""
    fig, (ax_start, ax_last) = plt.subplots(1, 2, figsize=(8, 3.2), sharey=True)
    for i, (name, agg) in enumerate(series.items()):
        steps = np.arange(len(agg["mean_dist_to_start"]))
        ax_start.plot(steps, agg["mean_dist_to_start"], label=name, color=f"C{i}")
        ax_last.plot(steps[1:], agg["mean_dist_to_last"][1:], label=name, color=f"C{i}")
    for ax, title in ((ax_start, "to start node"), (ax_last, "to previous node")):
        if knn_radius is not None:
            ax.axhline(knn_radius, ls="--", lw=1, color="grey", label="max KNN radius")
        ax.set_xlabel("step")
        ax.set_title(title)
    ax_start.set_ylabel("mean euclidean distance")
    ax_start.legend(fontsize=8)
    return _save(fig, path)


def channel_mean_scatter(coords: np.ndarray, values: dict[str, np.ndarray], path) -> Path:
    """Points coloured by their channel mean, one panel per feature map."""
    fig = plt.figure(figsize=(3.4 * len(values), 3.2))
    for i, (name, v) in enumerate(values.items()):
        ax = fig.add_subplot(1, len(values), i + 1, projection="3d")
        ax.scatter(coords[:, 0], coords[:, 1], coords[:, 2], c=v, s=4, cmap="viridis")
        ax.set_title(name, fontsize=9)
        ax.set_axis_off()
    return _save(fig, path)


def latency_bars(result: dict, path) -> Path:
    names = list(result)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(names, [result[n]["median_ms"] for n in names], color=["C0", "C1"][:len(names)])
    ax.errorbar(names, [result[n]["median_ms"] for n in names],
                yerr=[[0] * len(names), [result[n]["p95_ms"] - result[n]["median_ms"] for n in names]],
                fmt="none", color="k", capsize=4)
    ax.set_ylabel("ms per forward (median, p95 whisker)")
    return _save(fig, path)
