"""PNG figures for a pipeline run (headless matplotlib)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps the files byte-stable across runs
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return Path(path)


def plot_topdown(path, dataset, poses, layout=None, max_points=20000):
    """Top view of the merged cloud coloured by fragment, with wall traces."""
    fig, ax = plt.subplots(figsize=(6, 6))
    cmap = plt.get_cmap("tab10")
    n_total = sum(len(f) for f in dataset.fragments)
    stride = max(1, n_total // max_points)
    for k, (f, T) in enumerate(zip(dataset.fragments, poses)):
        p = T.apply(f.points[::stride])
        ax.scatter(p[:, 0], p[:, 1], s=0.3, color=cmap(k % 10), label=f"fragment {f.id}", rasterized=True)
    if layout is not None:
        lo = np.min([T.apply(f.points).min(axis=0) for f, T in zip(dataset.fragments, poses)], axis=0)
        hi = np.max([T.apply(f.points).max(axis=0) for f, T in zip(dataset.fragments, poses)], axis=0)
        for w in layout.walls:
            _draw_wall(ax, w.plane, lo, hi)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(loc="upper right", fontsize=6, markerscale=10)
    return _save(fig, path)


def _draw_wall(ax, plane, lo, hi):
    n = plane.normal
    if np.hypot(n[0], n[1]) < 1e-9:
        return
    # points on the line n_x x + n_y y + offset = 0 (at z where n_z matters, use z=0)
    d = np.array([-n[1], n[0]])
    d /= np.linalg.norm(d)
    p0 = -plane.offset * n[:2] / (n[0] ** 2 + n[1] ** 2)
    span = float(np.linalg.norm(hi[:2] - lo[:2]))
    seg = np.array([p0 - span * d, p0 + span * d])
    ax.plot(seg[:, 0], seg[:, 1], "k-", lw=0.8)
    ax.set_xlim(lo[0] - 0.2, hi[0] + 0.2)
    ax.set_ylim(lo[1] - 0.2, hi[1] + 0.2)


def plot_energy(path, joint):
    """Energy terms per outer iteration and totals over every inner step."""
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
    rows = joint.trace
    it = [r.iteration for r in rows]
    for name in ("e_layout", "e_frag", "e_pair", "total"):
        vals = np.array([getattr(r.energy, name) for r in rows])
        a1.semilogy(it, np.maximum(vals, 1e-300), marker="o", ms=3, label=name)
    a1.set_xlabel("outer iteration")
    a1.legend(fontsize=7)
    steps = [v for seq in joint.inner_energies for v in seq]
    a2.semilogy(np.maximum(steps, 1e-300), lw=1)
    a2.set_xlabel("inner step (concatenated)")
    a2.set_ylabel("total")
    fig.tight_layout()
    return _save(fig, path)


def plot_occupancy(path, layout):
    grid = layout.grid
    img = grid.occupancy.astype(float)
    b = layout.boundary_cells
    if len(b):
        img[b[:, 0], b[:, 1]] = 0.5
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(img.T, origin="lower", cmap="gray", interpolation="nearest")
    ax.set_title("base-plane occupancy (grey: boundary)")
    return _save(fig, path)


def render_figures(out, dataset, joint, metrics=None) -> dict:
    """Write all figures into ``out``; returns name -> path."""
    out = Path(out)
    arts = {"fig_topdown": plot_topdown(out / "topdown.png", dataset, joint.poses, joint.layout)}
    if joint.trace:
        arts["fig_energy"] = plot_energy(out / "energy.png", joint)
    if joint.layout is not None and joint.layout.grid is not None:
        arts["fig_occupancy"] = plot_occupancy(out / "occupancy.png", joint.layout)
    return arts
