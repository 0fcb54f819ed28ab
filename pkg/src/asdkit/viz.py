"""Scatter plots of reduced 2-D feature spaces, one per (machine, domain)."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import MissingPoints  # noqa: E402


@dataclass
class PointSet:
    machine: str
    domain: str
    xy: np.ndarray  # (n, 2)
    labels: list[str]


def read_points(path, color_by: str = "label") -> list[PointSet]:
    """Group a points CSV (clip_id, machine, domain, x, y, cluster_id, label, ...) by (machine, domain)."""
    groups: dict[tuple[str, str], tuple[list, list]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            xy, labels = groups.setdefault((row["machine"], row["domain"]), ([], []))
            xy.append((float(row["x"]), float(row["y"])))
            labels.append(row[color_by])
    return [PointSet(m, d, np.array(xy), labels) for (m, d), (xy, labels) in sorted(groups.items())]


def plot_group(points: PointSet, out_path, method: str, score: float | None = None, config_hash: str = "") -> str:
    if len(points.xy) == 0 or not any(points.labels):
        raise MissingPoints(f"{points.machine}/{points.domain}: no labeled points to plot")
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for label in sorted(set(points.labels)):
        mask = np.array([lab == label for lab in points.labels])
        ax.scatter(points.xy[mask, 0], points.xy[mask, 1], s=10, label=label or "(none)")
    title = f"{points.machine} {points.domain}, {method}"
    if score is not None:
        title += f" ({100 * score:.2f})"
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    ax.legend(fontsize=7, markerscale=1.5, loc="best")
    fig.tight_layout()
    fig.savefig(out_path, metadata={"config_hash": config_hash})
    plt.close(fig)
    return str(out_path)


def cmd_visualize(points: list[PointSet], out_dir, method: str, scores: dict[str, float] | None = None,
                  config_hash: str = "") -> list[str]:
    """Write `<machine>_<domain>_<method>.png` per group; `scores` maps machine to the value shown in the title."""
    if not points:
        raise MissingPoints("no reduced points to plot")
    os.makedirs(out_dir, exist_ok=True)
    scores = scores or {}
    return [
        plot_group(p, os.path.join(out_dir, f"{p.machine}_{p.domain}_{method}.png"), method,
                   scores.get(p.machine), config_hash)
        for p in points
    ]
