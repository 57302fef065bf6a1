"""Static figures from a results file: accuracy curves and KDE overlays."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .runner import read_records  # noqa: E402


def plot_accuracy(records: list[dict], path, label: str | None = None) -> Path:
    """Average accuracy after each task plus the accuracy of every task over time."""
    tasks = [r for r in records if r["event"] == "task"]
    fig, (ax_a, ax_r) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_a.plot([r["task"] for r in tasks], [r["A"] for r in tasks], marker="o", label=label or "A_T")
    ax_a.set_xlabel("tasks learned")
    ax_a.set_ylabel("average accuracy")
    ax_a.set_ylim(0, 1.02)
    ax_a.legend()
    n = len(tasks)
    for i in range(n):
        xs = [r["task"] for r in tasks if r["task"] > i]
        ax_r.plot(xs, [r["row"][i] for r in tasks if r["task"] > i], marker=".", label=f"task {i + 1}")
    ax_r.set_xlabel("tasks learned")
    ax_r.set_ylabel("accuracy on task")
    ax_r.set_ylim(0, 1.02)
    ax_r.legend(fontsize="small")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_kde(records: list[dict], path) -> Path | None:
    """Task-1 feature density before and after the stream, one panel per branch."""
    kdes = [r for r in records if r["event"] == "kde"]
    if not kdes:
        return None
    fig, axes = plt.subplots(1, len(kdes), figsize=(4.5 * len(kdes), 3.5), squeeze=False)
    for ax, rec in zip(axes[0], kdes):
        ax.plot(rec["grid"], rec["before"], label="after task 1")
        ax.plot(rec["grid"], rec["after"], label=f"after task {rec['task']}")
        ax.set_title(f"{rec['branch']} (TV {rec['divergence']:.3f})")
        ax.legend(fontsize="small")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_results(results_path, out_dir=None) -> list[Path]:
    results_path = Path(results_path)
    out = Path(out_dir) if out_dir is not None else results_path.parent
    out.mkdir(parents=True, exist_ok=True)
    records = read_records(results_path)
    made = [plot_accuracy(records, out / "accuracy.png")]
    kde = plot_kde(records, out / "kde.png")
    if kde is not None:
        made.append(kde)
    return made
