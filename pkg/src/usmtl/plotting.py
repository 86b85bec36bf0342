"""Figure rendering for training logs and metric reports (files only, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .heads import Family  # noqa: E402
from .metrics import MetricReport  # noqa: E402


def plot_loss_curves(trace: dict[Family, list[tuple[int, float]]], path) -> Path:
    """One line per family: mean raw loss against optimizer step, log scale."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    for fam, points in sorted(trace.items(), key=lambda kv: kv[0].value):
        if not points:
            continue
        steps, values = zip(*points)
        ax.plot(steps, values, label=fam.value, linewidth=1)
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("raw loss")
    ax.set_yscale("log")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_report(report: MetricReport, path) -> Path:
    """Horizontal bars of per-subtask normalized scores, colored by family."""
    path = Path(path)
    rows = sorted(report.subtasks, key=lambda s: (s.family.value, s.task_id))
    colors = {f: c for f, c in zip(Family, ("tab:blue", "tab:orange", "tab:green", "tab:red"))}
    fig, ax = plt.subplots(figsize=(6, 1.0 + 0.35 * max(1, len(rows))), dpi=100)
    ys = range(len(rows))
    ax.barh(list(ys), [s.task_score or 0.0 for s in rows], color=[colors[s.family] for s in rows])
    ax.set_yticks(list(ys), [s.task_id for s in rows], fontsize=8)
    ax.invert_yaxis()
    ax.set_xlim(0.0, 1.0)
    ax.set_xlabel("task score")
    if report.overall is not None:
        ax.axvline(report.overall, color="black", linestyle="--", linewidth=1)
        ax.set_title(f"overall {report.overall:.4f}", fontsize=9)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path
