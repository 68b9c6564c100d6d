"""Pairwise point-to-plane ICP.

Residuals use the *target* normal, ``r = (T(p) - q) . n_q``, and updates are
left-multiplied, ``T <- se3_exp(xi) @ T``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientCorrespondences
from .geometry import RigidTransform, SpatialIndex, se3_exp, voxel_downsample

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 30
    max_dist: float = 0.1
    max_normal_angle: float = np.deg2rad(30.0)
    convergence: float = 1e-6
    voxel_size: float = 0.02
    max_points: int = 20000
    overlap_dist: float = 0.05
    max_halvings: int = 8


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Matched index pairs; ``target_normal`` is in the target frame."""

    source_index: np.ndarray
    target_index: np.ndarray
    target_normal: np.ndarray

    def __len__(self):
        return len(self.source_index)


@dataclass(frozen=True, eq=False)
class IcpResult:
    transform: RigidTransform
    rmse: float
    overlap_ratio: float
    iterations: int
    converged: bool
    rmse_history: tuple = ()


def _index(fragment, index):
    return index if index is not None else SpatialIndex(fragment.points)


def find_correspondences(source, target, T: RigidTransform, max_dist=0.1,
                         max_normal_angle=np.deg2rad(30.0), target_index=None,
                         source_subset=None) -> Correspondences:
    """Nearest target point for each source point mapped by ``T``.

    A pair is kept when the distance is at most ``max_dist`` and the rotated
    source normal is within ``max_normal_angle`` of the target normal. Matches
    are not forced to be one-to-one.
    """
    tree = _index(target, target_index)
    src_idx = np.arange(len(source)) if source_subset is None else np.asarray(source_subset)
    p = T.apply(source.points[src_idx])
    dist, tgt = tree.nearest(p, max_dist=max_dist)
    ok = np.isfinite(dist) & (dist <= max_dist)
    src_idx, tgt = src_idx[ok], tgt[ok]
    ns = T.rotate(source.normals[src_idx])
    nt = target.normals[tgt]
    ok = np.einsum("ij,ij->i", ns, nt) >= np.cos(max_normal_angle)
    return Correspondences(src_idx[ok], tgt[ok], nt[ok])


def overlap_ratio(source, target, T: RigidTransform, dist_thresh=0.05, target_index=None,
                  source_subset=None) -> float:
    """Fraction of source points whose nearest target point (under ``T``) is
    within ``dist_thresh``."""
    tree = _index(target, target_index)
    src_idx = np.arange(len(source)) if source_subset is None else np.asarray(source_subset)
    if len(src_idx) == 0:
        return 0.0
    dist, _ = tree.nearest(T.apply(source.points[src_idx]), max_dist=dist_thresh)
    return float(np.mean(dist <= dist_thresh))


def point_to_plane_residuals(T: RigidTransform, src_pts, tgt_pts, tgt_normals):
    """Residuals ``(T(p) - q) . n_q`` and their Jacobian w.r.t. a left twist.

    Returns ``(r, J)`` with ``J`` of shape ``(N, 6)`` ordered ``[omega; v]``.
    """
    x = T.apply(src_pts)
    r = np.einsum("ij,ij->i", x - tgt_pts, tgt_normals)
    J = np.hstack([np.cross(x, tgt_normals), tgt_normals])
    return r, J


def _subsample(fragment, params: IcpParams):
    idx = voxel_downsample(fragment.points, params.voxel_size)
    if len(idx) > params.max_points:
        # coarsen until the cap is met; deterministic
        size = params.voxel_size
        while len(idx) > params.max_points:
            size *= 1.25
            idx = voxel_downsample(fragment.points, size)
    return idx


def icp_point_to_plane(source, target, T0: RigidTransform, params: IcpParams | None = None,
                       target_index=None) -> IcpResult:
    """Align ``source`` onto ``target`` starting from ``T0``.

    Each iteration matches, linearises ``sum(((T(p) - q) . n_q)^2)`` and solves
    for a twist. A step that would raise the residual on the current matches is
    halved (at most ``params.max_halvings`` times) before being rejected.

    Raises:
        InsufficientCorrespondences: fewer than 6 matches in some iteration.
    """
    params = params or IcpParams()
    tree = _index(target, target_index)
    sub = _subsample(source, params)
    T = T0
    history = []
    converged = False
    it = 0
    for it in range(1, params.max_iterations + 1):
        corr = find_correspondences(source, target, T, params.max_dist, params.max_normal_angle,
                                    target_index=tree, source_subset=sub)
        if len(corr) < 6:
            raise InsufficientCorrespondences(
                f"only {len(corr)} correspondences between fragments {source.id} and {target.id}"
            )
        p = source.points[corr.source_index]
        q = target.points[corr.target_index]
        n = corr.target_normal
        r, J = point_to_plane_residuals(T, p, q, n)
        cost = float(r @ r)
        history.append(np.sqrt(cost / len(r)))
        H = J.T @ J
        g = J.T @ r
        xi = np.linalg.lstsq(H, -g, rcond=1e-12)[0]
        step = 1.0
        accepted = False
        for _ in range(params.max_halvings + 1):
            T_new = se3_exp(step * xi) @ T
            r_new = point_to_plane_residuals(T_new, p, q, n)[0]
            if r_new @ r_new <= cost:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True
            break
        T = T_new
        if np.linalg.norm(step * xi) < params.convergence:
            converged = True
            break
    corr = find_correspondences(source, target, T, params.max_dist, params.max_normal_angle,
                                target_index=tree, source_subset=sub)
    if len(corr):
        r, _ = point_to_plane_residuals(
            T, source.points[corr.source_index], target.points[corr.target_index], corr.target_normal
        )
        rmse = float(np.sqrt(np.mean(r * r)))
    else:
        rmse = float("inf")
    ov = overlap_ratio(source, target, T, params.overlap_dist, target_index=tree, source_subset=sub)
    return IcpResult(T, rmse, ov, it, converged, tuple(history))
