"""Scene layout: dominant planes, base plane, occupancy grid and walls."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import NoPlanes
from .geometry import Plane, SpatialIndex, in_plane_axes
from .planes import hac_cluster

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LayoutParams:
    merge_threshold: float = 0.05
    cell_size: float = 0.10
    density_min: int = 5
    tau1: float = 0.1
    tau2: float = 0.3


@dataclass(frozen=True, eq=False)
class DominantPlane:
    plane: Plane
    inliers: np.ndarray  # (K, 2) rows of (fragment id, point index)
    points: np.ndarray  # (K, 3) world-frame inlier positions
    area: float = 0.0

    def with_plane(self, plane: Plane) -> "DominantPlane":
        return DominantPlane(plane, self.inliers, self.points, self.area)


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    origin: np.ndarray  # 2D, in-plane coordinates of cell (0, 0)'s corner
    cell_size: float
    occupancy: np.ndarray  # bool (nu, nv)
    axes: tuple  # (u, v) orthonormal, orthogonal to the plane normal
    plane: Plane

    def to_2d(self, points):
        points = np.asarray(points, dtype=float)
        u, v = self.axes
        return np.column_stack([points @ u, points @ v])

    def cell_of(self, points):
        uv = self.to_2d(points)
        return np.floor((uv - self.origin) / self.cell_size).astype(np.int64)

    def cell_centers(self, cells):
        cells = np.asarray(cells, dtype=float).reshape(-1, 2)
        return self.origin + (cells + 0.5) * self.cell_size


@dataclass(frozen=True, eq=False)
class Layout:
    base: DominantPlane
    walls: tuple
    boundary_cells: np.ndarray
    # extra base-parallel envelope planes (ceiling when the floor is base)
    parallels: tuple = ()
    grid: OccupancyGrid | None = None

    @property
    def planes(self):
        return [self.base.plane] + [p.plane for p in self.parallels] + [w.plane for w in self.walls]

    def role_planes(self):
        out = [("base", self.base.plane)]
        out += [("base", p.plane) for p in self.parallels]
        out += [("wall", w.plane) for w in self.walls]
        return out


# ---------------------------------------------------------------------------


def merge_dominant_planes(labelings, poses, fragments, merge_threshold=0.05) -> list:
    """Cluster all fragments' planes in the world frame.

    Each fragment plane and its inlier points are moved to the world frame by
    the fragment pose; planes are then merged by agglomerative clustering on
    their inlier groups and merged planes refit on the union.
    """
    hyps, support, inl = [], [], []
    for frag, lab, T in zip(fragments, labelings, poses):
        for k, pl in enumerate(lab.planes):
            idx = lab.inliers(k)
            if len(idx) == 0:
                continue
            hyps.append(pl.transformed(T))
            support.append(T.apply(frag.points[idx]))
            inl.append(np.column_stack([np.full(len(idx), frag.id), idx]))
    if not hyps:
        return []
    res = hac_cluster(hyps, support, merge_threshold, return_groups=True)
    out = []
    for pl, grp, pts in zip(res.planes, res.groups, res.support):
        out.append(DominantPlane(pl, np.vstack([inl[g] for g in grp]), pts))
    return out


def _plane_grid(points, plane: Plane, cell_size, density_min):
    u, v = in_plane_axes(plane.normal)
    uv = np.column_stack([points @ u, points @ v]) if len(points) else np.zeros((0, 2))
    if len(uv) == 0:
        origin = np.zeros(2)
        occ = np.zeros((1, 1), dtype=bool)
    else:
        origin = np.floor(uv.min(axis=0) / cell_size) * cell_size
        cells = np.floor((uv - origin) / cell_size).astype(np.int64)
        shape = cells.max(axis=0) + 1
        counts = np.zeros(shape, dtype=np.int64)
        np.add.at(counts, (cells[:, 0], cells[:, 1]), 1)
        occ = counts >= density_min
    return OccupancyGrid(origin, cell_size, occ, (u, v), plane)


def plane_area(plane: DominantPlane, cell_size=0.10, density_min=5) -> float:
    """Occupied-cell area of the plane's inliers projected into its own frame."""
    grid = _plane_grid(plane.points, plane.plane, cell_size, density_min)
    return float(np.count_nonzero(grid.occupancy)) * cell_size**2


def select_base_plane(planes) -> DominantPlane:
    """Largest-area plane; ties go to the lower index.

    Raises:
        NoPlanes: ``planes`` is empty.
    """
    if not planes:
        raise NoPlanes("no dominant planes to choose a base from")
    areas = [p.area for p in planes]
    return planes[int(np.argmax(areas))]


def build_occupancy_grid(points, base: DominantPlane, cell_size=0.10, density_min=5) -> OccupancyGrid:
    """Project all points onto the base plane and mark dense cells occupied."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    return _plane_grid(points, base.plane, cell_size, density_min)


def boundary_cells(grid: OccupancyGrid) -> np.ndarray:
    """Occupied cells with at least one 4-neighbour empty or off-grid."""
    occ = grid.occupancy
    inner = ndimage.binary_erosion(occ, structure=ndimage.generate_binary_structure(2, 1), border_value=0)
    return np.argwhere(occ & ~inner)


def boundary_distance(plane: DominantPlane, grid: OccupancyGrid, boundary, points=None) -> float:
    """Mean distance from projected inliers to the nearest boundary-cell center."""
    pts = plane.points if points is None else points
    if len(boundary) == 0 or len(pts) == 0:
        return np.inf
    centers = grid.cell_centers(boundary)
    tree = SpatialIndex(np.column_stack([centers, np.zeros(len(centers))]))
    uv = grid.to_2d(pts)
    d, _ = tree.nearest(np.column_stack([uv, np.zeros(len(uv))]))
    return float(np.mean(d))


def _outline_points(plane: DominantPlane, cell_size, density_min):
    """Inliers lying in the boundary cells of the plane's own footprint."""
    grid = _plane_grid(plane.points, plane.plane, cell_size, density_min)
    cells = grid.cell_of(plane.points)
    edge = np.zeros_like(grid.occupancy)
    b = boundary_cells(grid)
    edge[b[:, 0], b[:, 1]] = True
    return plane.points[edge[cells[:, 0], cells[:, 1]]]


def _refit_offset(plane_normal, points):
    return Plane(plane_normal, -float(np.mean(points @ plane_normal)))


def select_layout(planes, base: DominantPlane, grid: OccupancyGrid, tau1=0.1, tau2=0.3,
                  boundary=None, density_min=5) -> Layout:
    """Pick walls (near-perpendicular to the base and hugging the boundary).

    Walls are snapped exactly perpendicular to the base normal and their
    offsets refit on inliers. Base-parallel planes whose own footprint outline
    hugs the boundary join as extra envelope planes, snapped parallel.
    """
    if boundary is None:
        boundary = boundary_cells(grid)
    nb = base.plane.normal
    walls, parallels = [], []
    for p in planes:
        if p is base:
            continue
        c = abs(float(p.plane.normal @ nb))
        if c < tau1:
            g = boundary_distance(p, grid, boundary)
            if g < tau2:
                n = p.plane.normal - (p.plane.normal @ nb) * nb
                n /= np.linalg.norm(n)
                walls.append(p.with_plane(_refit_offset(n, p.points)))
        elif c > 1.0 - tau1:
            outline = _outline_points(p, grid.cell_size, density_min)
            g = boundary_distance(p, grid, boundary, points=outline)
            if g < tau2:
                n = nb if p.plane.normal @ nb > 0 else -nb
                parallels.append(p.with_plane(_refit_offset(n, p.points)))
    return Layout(base, tuple(walls), boundary, tuple(parallels), grid)


def estimate_layout(labelings, poses, fragments, params: LayoutParams | None = None,
                    all_points=None):
    """Dominant planes and layout for the fragments under ``poses``.

    Returns ``(layout, dominant_planes)``.

    Raises:
        NoPlanes: no dominant plane exists.
    """
    params = params or LayoutParams()
    dominant = merge_dominant_planes(labelings, poses, fragments, params.merge_threshold)
    if not dominant:
        raise NoPlanes("no dominant planes found")
    dominant = [
        DominantPlane(d.plane, d.inliers, d.points, plane_area(d, params.cell_size, params.density_min))
        for d in dominant
    ]
    base = select_base_plane(dominant)
    if all_points is None:
        all_points = np.vstack([T.apply(f.points) for f, T in zip(fragments, poses)])
    grid = build_occupancy_grid(all_points, base, params.cell_size, params.density_min)
    layout = select_layout(dominant, base, grid, params.tau1, params.tau2, density_min=params.density_min)
    return layout, dominant


def write_pgm(grid: OccupancyGrid, path, boundary=None):
    """Occupancy grid as a binary PGM (occupied 255, boundary 128, empty 0)."""
    img = np.where(grid.occupancy, 255, 0).astype(np.uint8)
    if boundary is not None and len(boundary):
        img[boundary[:, 0], boundary[:, 1]] = 128
    img = img.T[::-1]  # v up
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
