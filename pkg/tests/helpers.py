"""Scene builders shared by the test modules."""

import numpy as np

from layoutreg.geometry import RigidTransform, se3_exp
from layoutreg.io import Fragment

# lines collected by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def random_pose(rng, rot=1.0, trans=1.0) -> RigidTransform:
    return se3_exp(np.r_[rng.normal(size=3) * rot, rng.normal(size=3) * trans])


def plane_patch(rng, n, center, normal, size=1.0, sigma=0.0):
    """Points uniformly on a square patch of the plane through ``center``."""
    normal = np.asarray(normal, float) / np.linalg.norm(normal)
    e = np.zeros(3)
    e[np.argmin(np.abs(normal))] = 1.0
    u = np.cross(normal, e)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    s = (rng.random((n, 2)) - 0.5) * size
    pts = np.asarray(center, float) + np.outer(s[:, 0], u) + np.outer(s[:, 1], v)
    if sigma:
        pts = pts + rng.normal(scale=sigma, size=pts.shape)
    return pts, np.tile(normal, (n, 1))


def corner_fragment(rng, n_per_face=400, sigma=0.0, fid=0, size=1.0):
    """Three mutually orthogonal faces meeting at the origin, seen from (1,1,1)."""
    chunks = []
    for axis in range(3):
        nrm = np.zeros(3)
        nrm[axis] = 1.0
        pts = rng.random((n_per_face, 3)) * size
        pts[:, axis] = 0.0
        if sigma:
            pts = pts + rng.normal(scale=sigma, size=pts.shape)
        chunks.append((pts, np.tile(nrm, (n_per_face, 1))))
    pts = np.vstack([c[0] for c in chunks])
    nrm = np.vstack([c[1] for c in chunks])
    return Fragment(fid, pts, nrm, sensor_origin=np.full(3, size))
