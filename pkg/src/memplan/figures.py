"""SVG figures for reports. Rendering is byte-stable: fixed hash salt, no date stamp."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "memplan"
matplotlib.rcParams["svg.fonttype"] = "path"


def save_svg(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _draw_maze(ax, env) -> None:
    walls = env.walls() if hasattr(env, "walls") else []
    if walls:
        w = np.asarray(walls)
        ax.scatter(w[:, 0], w[:, 1], marker="s", s=36, c="0.15", linewidths=0)
    ax.set_xlim(-0.5, env.width - 0.5)
    ax.set_ylim(-0.5, env.height - 0.5)
    ax.set_aspect("equal")


def roadmap_figure(env, log, roadmap, path, plan=None) -> None:
    """Maze walls, roadmap vertices and edges; an optional stitched plan on top."""
    fig, ax = plt.subplots(figsize=(6, 6))
    _draw_maze(ax, env)
    pos = log.poses[roadmap.vertices] if roadmap.n_vertices else np.zeros((0, 2))
    if roadmap.edges:
        pairs = np.array(sorted(roadmap.edges))
        for a, b in pairs:
            ax.plot(pos[[a, b], 0], pos[[a, b], 1], c="tab:blue", lw=0.4, alpha=0.35)
    if len(pos):
        ax.scatter(pos[:, 0], pos[:, 1], s=10, c="tab:orange", zorder=3)
    if plan is not None and plan.segments:
        p = log.poses[plan.states()]
        ax.plot(p[:, 0], p[:, 1], c="tab:red", lw=2, zorder=4)
        ax.scatter(p[[0, -1], 0], p[[0, -1], 1], s=40, c=["tab:green", "tab:red"], zorder=5)
    ax.set_title(f"{roadmap.kind}: {roadmap.n_vertices} vertices, {len(roadmap.edges)} edges")
    save_svg(fig, path)


def calibration_figure(raw: dict, path) -> None:
    """Embedding distance and Q distance against BFS distance, with per-bin means."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    bfs = np.asarray(raw["bfs"])
    for ax, key, label in zip(axes, ("d_phi", "d_q"), ("embedding distance", "Q distance")):
        y = np.asarray(raw[key], dtype=float)
        ax.scatter(bfs, y, s=3, alpha=0.3)
        bins = np.unique(bfs)
        ax.plot(bins, [y[bfs == k].mean() for k in bins], c="k", marker="o", ms=3)
        ax.set_xlabel("BFS distance")
        ax.set_ylabel(label)
    save_svg(fig, path)


def success_figure(curves: dict, path) -> None:
    """Success rate per band with Wilson intervals, one line per policy."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in sorted(curves):
        bands = curves[name]["bands"]
        n = np.array([b["n"] for b in bands])
        rate = np.array([b["rate"] for b in bands])
        err = np.array([[b["rate"] - b["ci_low"] for b in bands], [b["ci_high"] - b["rate"] for b in bands]])
        ax.errorbar(n, rate, yerr=err, marker="o", capsize=3, label=name)
    ax.set_xlabel("start-goal distance band")
    ax.set_ylabel("success rate")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    save_svg(fig, path)


def loss_figure(rows, labels: list[str], path) -> None:
    """Training curves; ``rows`` are (step, value, ...) with one label per value column."""
    fig, ax = plt.subplots(figsize=(6, 4))
    if len(rows):
        arr = np.asarray(rows, dtype=float)
        for k, label in enumerate(labels, start=1):
            ax.plot(arr[:, 0], arr[:, k], label=label)
        ax.legend()
    ax.set_xlabel("step")
    ax.set_yscale("symlog", linthresh=1e-3)
    save_svg(fig, path)
