"""Reconstruction and trajectory error metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import EmptyCloud, LengthMismatch
from .geometry import SpatialIndex


@dataclass(frozen=True)
class ReconstructionError:
    average: float
    median: float


@dataclass(frozen=True)
class TrajectoryError:
    rmse: float
    median: float


def reconstruction_error(estimated, ground_truth) -> ReconstructionError:
    """Distances from each estimated point to its nearest ground-truth point.

    One-directional: missing regions in the estimate are not penalised.
    """
    est = np.asarray(estimated, dtype=float).reshape(-1, 3)
    gt = np.asarray(ground_truth, dtype=float).reshape(-1, 3)
    if len(est) == 0 or len(gt) == 0:
        raise EmptyCloud("reconstruction error needs two non-empty clouds")
    d, _ = SpatialIndex(gt).nearest(est)
    return ReconstructionError(float(np.mean(d)), float(np.median(d)))


def align_trajectory(estimated, ground_truth, mode="anchor"):
    """Map the estimated poses into the ground-truth frame.

    ``"anchor"`` composes every pose with the correction that makes pose 0
    coincide; ``"se3"`` fits the rigid motion minimising the squared distance
    between camera positions.
    """
    if len(estimated) != len(ground_truth):
        raise LengthMismatch(f"{len(estimated)} estimated poses vs {len(ground_truth)} ground truth")
    if len(estimated) == 0:
        return []
    if mode == "anchor":
        C = ground_truth[0] @ estimated[0].inverse()
    elif mode == "se3":
        from .geometry import RigidTransform

        a = np.array([T.translation for T in estimated])
        b = np.array([T.translation for T in ground_truth])
        ca, cb = a.mean(axis=0), b.mean(axis=0)
        if len(a) < 3:
            R = np.eye(3)
        else:
            R = Rotation.align_vectors(b - cb, a - ca)[0].as_matrix()
        C = RigidTransform(R, cb - R @ ca)
    else:
        raise ValueError(f"unknown alignment {mode!r}")
    return [C @ T for T in estimated]


def trajectory_error(estimated, ground_truth, alignment="anchor") -> TrajectoryError:
    """RMSE and median of per-pose translation errors after alignment.

    Raises:
        LengthMismatch: the trajectories differ in length.
    """
    aligned = align_trajectory(estimated, ground_truth, alignment)
    if not aligned:
        return TrajectoryError(0.0, 0.0)
    err = np.array([np.linalg.norm(A.translation - G.translation) for A, G in zip(aligned, ground_truth)])
    return TrajectoryError(float(np.sqrt(np.mean(err**2))), float(np.median(err)))


def envelope_planarity(points, planes) -> float:
    """RMS distance from each point to the nearest of ``planes``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyCloud("no envelope points")
    N = np.array([p.normal for p in planes])
    d = np.array([p.offset for p in planes])
    dist = np.min(np.abs(pts @ N.T + d), axis=1)
    return float(np.sqrt(np.mean(dist**2)))


def envelope_points(fragments, poses):
    """World-frame points of all fragments whose surface id marks floor,
    ceiling or wall (non-negative ids)."""
    chunks = []
    for f, T in zip(fragments, poses):
        if f.surface_ids is None:
            raise ValueError(f"fragment {f.id} carries no surface ids")
        chunks.append(T.apply(f.points[f.surface_ids >= 0]))
    return np.vstack(chunks) if chunks else np.zeros((0, 3))
