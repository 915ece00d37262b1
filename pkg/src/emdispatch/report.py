"""Figure rendering for run reports: reward/loss curves, metric bars and
per-station Gantt timelines, written as PNG next to the delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

TASK_COLOR = "#d62728"
WORK_COLOR = "#4878a8"


def save_curve(values, path, title, xlabel, ylabel, smooth: int = 0) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    xs = np.arange(len(values))
    ax.plot(xs, values, lw=0.9, alpha=0.55 if smooth else 1.0, color="#335577")
    if smooth and len(values) > smooth:
        kernel = np.ones(smooth) / smooth
        ys = np.convolve(values, kernel, mode="valid")
        ax.plot(np.arange(len(ys)) + smooth - 1, ys, lw=1.8, color="#d62728",
                label=f"moving mean ({smooth})")
        ax.legend(frameon=False)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_metric_bars(rows: list[dict], path) -> None:
    """Grouped bars of mean completion rate and damage rate per algorithm."""
    algos = [r["algorithm"] for r in rows]
    x = np.arange(len(algos))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    ax1.bar(x, [r["mean_R_work"] for r in rows], color="#4878a8")
    ax1.set_xticks(x, algos, rotation=15)
    ax1.set_ylim(0, 1)
    ax1.set_title("mean work completion rate")
    ax1.grid(axis="y", alpha=0.3)
    ax2.bar(x, [r["rate_fail"] for r in rows], color="#d62728")
    ax2.set_xticks(x, algos, rotation=15)
    ax2.set_title("station damage rate")
    ax2.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_gantt(bars: list[dict], path, max_stations: int = 40) -> None:
    """Per-station timeline; disposal steps highlighted over normal work.

    Stations are ordered by area then id on the vertical axis; only the
    busiest ``max_stations`` rows are drawn to keep the figure readable.
    """
    if not bars:
        fig, ax = plt.subplots(figsize=(8, 2))
        ax.set_title("no executed vertices")
        fig.savefig(path, dpi=130)
        plt.close(fig)
        return
    by_station: dict[int, list[dict]] = {}
    for bar in bars:
        by_station.setdefault(bar["station"], []).append(bar)
    busiest = sorted(by_station, key=lambda s: -len(by_station[s]))[:max_stations]
    ordered = sorted(busiest, key=lambda s: (by_station[s][0].get("area", ""), s))
    fig, ax = plt.subplots(figsize=(10, max(3, 0.24 * len(ordered))))
    for row, station in enumerate(ordered):
        for bar in by_station[station]:
            is_task = int(bar.get("kind", 1)) == 2
            ax.barh(row, bar["end"] - bar["start"], left=bar["start"], height=0.72,
                    color=TASK_COLOR if is_task else WORK_COLOR,
                    edgecolor="none", alpha=0.95 if is_task else 0.6)
    labels = [f'{by_station[s][0].get("area", "")}:{s}' for s in ordered]
    ax.set_yticks(range(len(ordered)), labels, fontsize=6)
    ax.set_xlabel("tick")
    ax.set_title("executed work (blue) and disposal tasks (red) per station")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
