"""Rigid transforms, planes and nearest-neighbour queries.

Conventions
-----------
* A transform ``T = (R, t)`` maps a point ``p`` to ``R @ p + t``.
* Twists are 6-vectors ordered ``[omega; v]`` (rotation first, radians, then
  translation, meters).
* Pose updates are applied by left multiplication: ``T <- se3_exp(xi) @ T``.
* A plane is ``{x : n . x + offset = 0}`` with ``|n| = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import DegenerateInput

SMALL_ANGLE = 1e-8
_SERIES_ANGLE = 1e-3


def skew(w):
    """Cross-product matrix ``[w]x`` such that ``skew(w) @ u == cross(w, u)``."""
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]], dtype=float
    )


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_translation(cls, x, y=None, z=None) -> "RigidTransform":
        t = np.array([x, y, z] if y is not None else x, dtype=float)
        return cls(np.eye(3), t)

    @classmethod
    def from_axis_angle(cls, axis, angle, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        return cls(so3_exp(axis * angle), translation)

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def as_3x4(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    def apply(self, points) -> np.ndarray:
        """Transform one point ``(3,)`` or many ``(N, 3)``."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def rotate(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def allclose(self, other: "RigidTransform", atol=1e-9) -> bool:
        return np.allclose(self.rotation, other.rotation, atol=atol) and np.allclose(
            self.translation, other.translation, atol=atol
        )

    def __repr__(self):
        rv = Rotation.from_matrix(self.rotation).as_rotvec()
        return f"RigidTransform(rotvec={np.round(rv, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


def apply_transform(T: RigidTransform, p) -> np.ndarray:
    return T.apply(p)


def compose(Ta: RigidTransform, Tb: RigidTransform) -> RigidTransform:
    """``compose(Ta, Tb)`` applies ``Tb`` first, then ``Ta``."""
    return Ta @ Tb


def inverse(T: RigidTransform) -> RigidTransform:
    return T.inverse()


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * W @ W
    a = np.sin(theta) / theta
    b = 2.0 * np.sin(0.5 * theta) ** 2 / theta**2
    return np.eye(3) + a * W + b * W @ W


def so3_log(R) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()


def so3_left_jacobian(w) -> np.ndarray:
    """Left Jacobian of SO(3); also the ``V`` matrix of the SE(3) exponential."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        b = 0.5 - t2 / 24.0
        c = 1.0 / 6.0 - t2 / 120.0
    else:
        b = 2.0 * np.sin(0.5 * theta) ** 2 / theta**2
        c = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + b * W + c * W @ W


def se3_exp(xi) -> RigidTransform:
    """SE(3) exponential of a twist ``[omega; v]``.

    Below ``|omega| < 1e-8`` the rotation and ``V`` use their two-term Taylor
    expansions.
    """
    xi = np.asarray(xi, dtype=float).reshape(6)
    w, v = xi[:3], xi[3:]
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < SMALL_ANGLE:
        R = np.eye(3) + W + 0.5 * W @ W
        V = np.eye(3) + 0.5 * W + W @ W / 6.0
    else:
        R = so3_exp(w)
        V = so3_left_jacobian(w)
    return RigidTransform(R, V @ v)


def se3_log(T: RigidTransform) -> np.ndarray:
    w = so3_log(T.rotation)
    V = so3_left_jacobian(w)
    v = np.linalg.solve(V, T.translation)
    return np.concatenate([w, v])


def _se3_q(w, v) -> np.ndarray:
    theta = np.linalg.norm(w)
    W = skew(w)
    P = skew(v)
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0
        c2 = 1.0 / 24.0 - t2 / 720.0
        c3 = 1.0 / 120.0 - t2 / 2520.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        c1 = (theta - s) / theta**3
        c2 = (theta**2 + 2.0 * c - 2.0) / (2.0 * theta**4)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta**5)
    WP = W @ P
    PW = P @ W
    WPW = WP @ W
    WW = W @ W
    return (
        0.5 * P
        + c1 * (WP + PW + WPW)
        + c2 * (WW @ P + P @ WW - 3.0 * WPW)
        + c3 * (WPW @ W + W @ WPW)
    )


def se3_left_jacobian(xi) -> np.ndarray:
    """6x6 left Jacobian of SE(3) in ``[omega; v]`` ordering."""
    xi = np.asarray(xi, dtype=float)
    w, v = xi[:3], xi[3:]
    J = so3_left_jacobian(w)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, 3:] = J
    out[3:, :3] = _se3_q(w, v)
    return out


def se3_right_jacobian_inv(xi) -> np.ndarray:
    """Inverse right Jacobian: ``log(exp(xi) exp(d)) ~ xi + Jr^-1(xi) d``."""
    xi = -np.asarray(xi, dtype=float)
    w, v = xi[:3], xi[3:]
    Jinv = np.linalg.inv(so3_left_jacobian(w))
    Q = _se3_q(w, v)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[3:, :3] = -Jinv @ Q @ Jinv
    return out


def adjoint(T: RigidTransform) -> np.ndarray:
    """Adjoint in ``[omega; v]`` ordering: ``T exp(xi) T^-1 = exp(Ad_T xi)``."""
    R, t = T.rotation, T.translation
    out = np.zeros((6, 6))
    out[:3, :3] = R
    out[3:, 3:] = R
    out[3:, :3] = skew(t) @ R
    return out


@dataclass(frozen=True, eq=False)
class Plane:
    """Oriented plane ``n . x + offset = 0``."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.array(self.normal, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if not np.isfinite(norm) or norm == 0.0:
            raise DegenerateInput("plane normal must be non-zero")
        n = n / norm
        n.flags.writeable = False
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset) / norm)

    def signed_distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.normal + self.offset

    def distance(self, points) -> np.ndarray:
        return np.abs(self.signed_distance(points))

    def project(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        d = self.signed_distance(points)
        return points - np.multiply.outer(d, self.normal)

    def transformed(self, T: RigidTransform) -> "Plane":
        n = T.rotation @ self.normal
        return Plane(n, self.offset - n @ T.translation)

    def flipped(self) -> "Plane":
        return Plane(-self.normal, -self.offset)

    def __repr__(self):
        return f"Plane(normal={np.round(self.normal, 6).tolist()}, offset={self.offset:.6f})"


def point_plane_distance(plane: Plane, p):
    """Unsigned distance ``|n . p + offset|``; vectorised over ``(N, 3)`` input."""
    d = plane.distance(p)
    return float(d) if np.ndim(d) == 0 else d


def plane_through(a, b, c, tol=1e-12) -> Plane | None:
    """Plane through three points, or ``None`` when they are collinear."""
    a, b, c = (np.asarray(x, dtype=float) for x in (a, b, c))
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n)
    scale = max(np.linalg.norm(b - a) * np.linalg.norm(c - a), 1e-300)
    if norm <= tol * scale:
        return None
    n = n / norm
    return Plane(n, -n @ a)


def orient_plane(plane: Plane, viewpoint) -> Plane:
    """Flip the plane so the viewpoint lies on its positive side."""
    if plane.signed_distance(viewpoint) < 0.0:
        return plane.flipped()
    return plane


def fit_plane_ls(points, viewpoint=None, rel_tol=1e-12) -> Plane:
    """Total least-squares plane through ``points``.

    The normal is the scatter-matrix eigenvector with the smallest eigenvalue.
    With ``viewpoint`` given the normal is flipped to face it; otherwise the
    sign is canonicalised so its largest-magnitude component is positive.

    Raises:
        DegenerateInput: fewer than 3 points, or the points are collinear.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) < 3:
        raise DegenerateInput(f"need at least 3 points to fit a plane, got {len(points)}")
    centroid = points.mean(axis=0)
    X = points - centroid
    S = X.T @ X
    evals, evecs = np.linalg.eigh(S)
    if evals[1] <= rel_tol * max(evals[2], 1e-300):
        raise DegenerateInput("points are collinear")
    n = evecs[:, 0]
    if viewpoint is not None:
        if n @ (np.asarray(viewpoint, dtype=float) - centroid) < 0.0:
            n = -n
    elif n[np.argmax(np.abs(n))] < 0.0:
        n = -n
    return Plane(n, -n @ centroid)


class SpatialIndex:
    """Immutable k-NN / radius index over a point snapshot (k-d tree backed)."""

    def __init__(self, points):
        pts = np.array(points, dtype=float).reshape(-1, 3)
        pts.flags.writeable = False
        self.points = pts
        self._tree = cKDTree(pts) if len(pts) else None

    def __len__(self):
        return len(self.points)

    def knn(self, queries, k=1, max_dist=np.inf):
        """Return ``(dist, idx)`` arrays of shape ``(M, k)``, nearest first.

        Missing neighbours (beyond ``max_dist`` or past the snapshot size) have
        ``dist = inf`` and ``idx = len(self)``.
        """
        queries = np.asarray(queries, dtype=float).reshape(-1, 3)
        if self._tree is None:
            return (
                np.full((len(queries), k), np.inf),
                np.zeros((len(queries), k), dtype=np.intp),
            )
        dist, idx = self._tree.query(queries, k=k, distance_upper_bound=max_dist)
        dist = np.asarray(dist).reshape(len(queries), k)
        idx = np.asarray(idx).reshape(len(queries), k)
        return dist, idx

    def nearest(self, queries, max_dist=np.inf):
        dist, idx = self.knn(queries, 1, max_dist=max_dist)
        return dist[:, 0], idx[:, 0]

    def radius(self, query, r):
        """Indices of all points within ``r`` of ``query``, sorted by index."""
        if self._tree is None:
            return np.zeros(0, dtype=np.intp)
        return np.array(sorted(self._tree.query_ball_point(np.asarray(query, float), r)), dtype=np.intp)


def voxel_downsample(points, voxel_size) -> np.ndarray:
    """Indices of one representative point per occupied voxel.

    The representative is the point closest to its voxel's centroid; indices are
    returned sorted, so the result is deterministic.
    """
    points = np.asarray(points, dtype=float)
    if len(points) == 0 or voxel_size <= 0:
        return np.arange(len(points))
    keys = np.floor(points / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, points)
    centroids = sums / counts[:, None]
    d2 = np.sum((points - centroids[inverse]) ** 2, axis=1)
    order = np.lexsort((np.arange(len(points)), d2, inverse))
    first = np.ones(len(order), dtype=bool)
    first[1:] = inverse[order][1:] != inverse[order][:-1]
    return np.sort(order[first])


def in_plane_axes(normal):
    """Two orthonormal vectors spanning the plane orthogonal to ``normal``."""
    n = np.asarray(normal, dtype=float)
    e = np.zeros(3)
    e[np.argmin(np.abs(n))] = 1.0
    u = np.cross(n, e)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    return u, v
