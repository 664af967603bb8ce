"""Matplotlib renderings saved next to the delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .labeling import PseudoLabel
from .metrics import EvalReport
from .tracker import TrackRow


def save_loss_curve(curve: list[float], path: str | Path):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(curve)), curve, lw=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean position loss")
    ax.set_title("regressor training")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_label_map(labels: list[PseudoLabel], path: str | Path):
    """Top-down world view of pseudo-label barycenters, one color per track."""
    fig, ax = plt.subplots(figsize=(6, 6))
    seen = {}
    for l in labels:
        if l.track_id not in seen:
            seen[l.track_id] = l
    for tid, l in sorted(seen.items()):
        ax.scatter(l.position_world[0], l.position_world[2], s=30 + l.support, alpha=0.8)
        ax.annotate(str(tid), (l.position_world[0], l.position_world[2]), fontsize=9)
    ax.set_xlabel("world x [m]")
    ax.set_ylabel("world z [m]")
    ax.set_title(f"pseudo labels ({len(seen)} tracks)")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_trajectories(rows: list[TrackRow], path: str | Path):
    """Camera-frame top-down (x vs z) trajectory of each track."""
    fig, ax = plt.subplots(figsize=(6, 6))
    by_track: dict[int, list[TrackRow]] = {}
    for r in rows:
        by_track.setdefault(r.track_id, []).append(r)
    for tid, trows in sorted(by_track.items()):
        trows.sort(key=lambda r: r.frame)
        xs = [r.x_cam for r in trows]
        zs = [r.z_cam for r in trows]
        ax.plot(xs, zs, marker=".", ms=3, lw=1, label=f"track {tid}")
    ax.set_xlabel("camera x [m]")
    ax.set_ylabel("camera z (depth) [m]")
    ax.set_title(f"{len(by_track)} tracks")
    if by_track and len(by_track) <= 12:
        ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_eval_summary(named_reports: list[tuple[str, EvalReport]], path: str | Path):
    names = [n for n, _ in named_reports]
    mota = [r.mota for _, r in named_reports]
    idf1 = [r.idf1 for _, r in named_reports]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(6, 1.5 * len(names)), 4))
    ax.bar(x - 0.2, mota, width=0.4, label="MOTA")
    ax.bar(x + 0.2, idf1, width=0.4, label="IDF1")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylim(min(0.0, min(mota + idf1)) - 0.05, 1.05)
    ax.legend()
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
