"""Figures for evaluation reports (rendered off-screen)."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from e4srec.evaluation import MetricsReport  # noqa: E402


def plot_reports(reports: dict[str, MetricsReport], path: str | os.PathLike, title: str = "") -> None:
    """Overall metrics per model (left) and HR@10 by user-sparsity group (right)."""
    names = list(reports)
    metrics = [m for m in next(iter(reports.values())).metrics if m.startswith(("HR@", "nDCG@"))]
    groups = list(next(iter(reports.values())).groups)
    fig, axes = plt.subplots(1, 2 if groups else 1, figsize=(11 if groups else 6, 4), squeeze=False)
    width = 0.8 / len(names)
    x = np.arange(len(metrics))
    ax = axes[0, 0]
    for j, name in enumerate(names):
        ax.bar(x + j * width, [reports[name].metrics[m] for m in metrics], width, label=name)
    ax.set_xticks(x + width * (len(names) - 1) / 2, metrics, rotation=30)
    ax.set_ylim(0, 1)
    ax.set_title("overall")
    if groups:
        key = "HR@10" if "HR@10" in metrics else metrics[0]
        ax = axes[0, 1]
        gx = np.arange(len(groups))
        for j, name in enumerate(names):
            ax.bar(gx + j * width, [reports[name].groups.get(g, {}).get(key) or 0.0 for g in groups], width, label=name)
        sizes = next(iter(reports.values())).group_sizes
        ax.set_xticks(gx + width * (len(names) - 1) / 2, [f"{g}\n(n={sizes.get(g, 0)})" for g in groups])
        ax.set_ylim(0, 1)
        ax.set_title(f"{key} by user sparsity")
    if title:
        fig.suptitle(title)
    handles, labels = axes[0, 0].get_legend_handles_labels()
    fig.legend(handles, labels, loc="lower center", ncol=len(names), fontsize=8, frameon=False)
    fig.tight_layout(rect=(0, 0.06, 1, 1))
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_training(history: list[dict], path: str | os.PathLike, title: str = "") -> None:
    """Loss and validation HR@10 per epoch."""
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [h["loss"] for h in history], marker="o", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if any("valid_hr10" in h for h in history):
        ax2 = ax.twinx()
        pts = [(h["epoch"], h["valid_hr10"]) for h in history if "valid_hr10" in h]
        ax2.plot(*zip(*pts), marker="s", color="tab:orange", label="valid HR@10")
        ax2.set_ylabel("valid HR@10")
        ax2.set_ylim(0, 1)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
