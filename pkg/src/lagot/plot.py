"""Static SVG figures of samples, transport paths and the cost landscape."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .lagrangian import MetricField, Potential  # noqa: E402
from .spline import PathSpline  # noqa: E402


def transport_figure(path: str | Path, source: np.ndarray, target: np.ndarray, pushed: np.ndarray | None = None,
                     splines: list[PathSpline] | None = None, potential: Potential | None = None,
                     metric: MetricField | None = None, grid: np.ndarray | None = None,
                     title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 6))
    pts = [source, target] + ([pushed] if pushed is not None else [])
    allp = np.vstack(pts)
    lo, hi = allp.min(0), allp.max(0)
    span = np.maximum(hi - lo, 1e-6)
    lo, hi = lo - 0.15 * span, hi + 0.15 * span

    if potential is not None:
        g1, g2 = np.meshgrid(np.linspace(lo[0], hi[0], 200), np.linspace(lo[1], hi[1], 200))
        U = potential.hard(np.stack([g1.ravel(), g2.ravel()], 1)).reshape(g1.shape)
        if np.ptp(U) > 0:
            ax.contourf(g1, g2, U, levels=12, cmap="Greys_r", alpha=0.35)
    if metric is not None and grid is not None:
        # the cheap direction: eigenvector of the smallest eigenvalue
        _, vecs = np.linalg.eigh(metric.matrices(grid))
        u = vecs[:, :, 0]
        ax.quiver(grid[:, 0], grid[:, 1], u[:, 0], u[:, 1], headaxislength=0, headlength=0,
                  pivot="middle", color="tab:purple", alpha=0.6, width=0.003)

    if splines:
        t = np.linspace(0.0, 1.0, 64)
        for s in splines:
            p = s.eval_path(t)
            ax.plot(p[:, 0], p[:, 1], color="tab:gray", lw=0.6, alpha=0.7)
    ax.scatter(source[:, 0], source[:, 1], s=4, color="tab:blue", label="source")
    ax.scatter(target[:, 0], target[:, 1], s=4, color="tab:orange", label="target")
    if pushed is not None:
        ax.scatter(pushed[:, 0], pushed[:, 1], s=4, color="tab:green", label="push-forward")
    ax.set_xlim(lo[0], hi[0])
    ax.set_ylim(lo[1], hi[1])
    ax.set_aspect("equal")
    ax.legend(loc="upper right", fontsize=8, markerscale=3)
    if title:
        ax.set_title(title)
    out = Path(path)
    fig.savefig(out, format="svg")
    plt.close(fig)
    return out


def sequence_figure(path: str | Path, measures: list[np.ndarray], metric: MetricField | None = None,
                    grid: np.ndarray | None = None, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 6))
    colors = plt.cm.viridis(np.linspace(0, 1, len(measures)))
    if metric is not None and grid is not None:
        _, vecs = np.linalg.eigh(metric.matrices(grid))
        u = vecs[:, :, 0]
        ax.quiver(grid[:, 0], grid[:, 1], u[:, 0], u[:, 1], headaxislength=0, headlength=0,
                  pivot="middle", color="tab:purple", alpha=0.7, width=0.003)
    for c, m in zip(colors, measures):
        ax.scatter(m[:, 0], m[:, 1], s=3, color=c)
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    out = Path(path)
    fig.savefig(out, format="svg")
    plt.close(fig)
    return out
