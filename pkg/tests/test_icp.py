import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from layoutreg.errors import InsufficientCorrespondences
from layoutreg.geometry import RigidTransform, se3_exp
from layoutreg.icp import (
    IcpParams,
    find_correspondences,
    icp_point_to_plane,
    overlap_ratio,
    point_to_plane_residuals,
)
from layoutreg.io import Fragment

from helpers import corner_fragment, plane_patch


def _square(rng, n, x0, size=1.0):
    pts = np.column_stack([x0 + rng.random(n) * size, rng.random(n) * size, np.zeros(n)])
    return Fragment(0, pts, np.tile([0, 0, 1.0], (n, 1)), sensor_origin=[0, 0, 1])


def test_identical_clouds_match_themselves(rng):
    f = corner_fragment(rng, 200)
    c = find_correspondences(f, f, RigidTransform.identity(), max_dist=0.1)
    assert len(c) == len(f)
    assert np.array_equal(c.source_index, c.target_index)


def test_far_clouds_have_no_matches(rng):
    f = corner_fragment(rng, 200)
    g = f.transformed(RigidTransform.from_translation(0, 0, 0.2 + 1.5))
    assert len(find_correspondences(g, f, RigidTransform.identity(), max_dist=0.1)) == 0


def test_normal_gate_rejects_opposed_normals(rng):
    f = _square(rng, 300, 0.0)
    flipped = Fragment(1, f.points, -f.normals)
    assert len(find_correspondences(flipped, f, RigidTransform.identity(), 0.1)) == 0


def test_half_overlap_matches_analytic_fraction():
    rng = np.random.default_rng(11)
    # unit squares shifted by half a side: analytic overlap area 0.5
    a = _square(rng, 20000, 0.0)
    b = _square(rng, 20000, 0.5)
    frac = overlap_ratio(a, b, RigidTransform.identity(), 0.02)
    assert frac == pytest.approx(0.5, abs=0.05)
    c = find_correspondences(a, b, RigidTransform.identity(), max_dist=0.02)
    assert len(c) / len(a) == pytest.approx(0.5, abs=0.05)


def test_overlap_extremes(rng):
    a = _square(rng, 500, 0.0)
    assert overlap_ratio(a, a, RigidTransform.identity(), 0.05) == 1.0
    far = _square(rng, 500, 5.0)
    assert overlap_ratio(a, far, RigidTransform.identity(), 0.05) == 0.0


def test_icp_identity_on_identical_input():
    rng = np.random.default_rng(2)
    f = corner_fragment(rng, 340)  # ~1,000 points
    res = icp_point_to_plane(f, f, RigidTransform.identity())
    assert np.linalg.norm(res.transform.translation) < 1e-6
    assert res.converged


def test_icp_recovers_known_translation():
    rng = np.random.default_rng(3)
    src = corner_fragment(rng, 1500, sigma=0.001)
    motion = RigidTransform.from_translation(0.05, 0.0, 0.0)
    tgt = src.transformed(motion)
    res = icp_point_to_plane(src, tgt, RigidTransform.identity(), IcpParams(voxel_size=0.0))
    assert np.allclose(res.transform.translation, [0.05, 0, 0], atol=1e-4)
    assert np.allclose(res.transform.rotation, np.eye(3), atol=1e-4)


def test_icp_recovers_small_rigid_motion():
    rng = np.random.default_rng(4)
    src = corner_fragment(rng, 1500)
    motion = se3_exp([0.02, -0.03, 0.04, 0.03, -0.02, 0.01])
    res = icp_point_to_plane(src, src.transformed(motion), RigidTransform.identity(), IcpParams(voxel_size=0.0))
    assert res.transform.allclose(motion, atol=1e-6)


def test_single_plane_slides():
    rng = np.random.default_rng(5)
    pts, nrm = plane_patch(rng, 3000, [0, 0, 0], [0, 0, 1], size=2.0, sigma=0.002)
    src = Fragment(0, pts, nrm, sensor_origin=[0, 0, 1])
    motion = RigidTransform.from_translation(0.04, 0.03, 0.0)
    res = icp_point_to_plane(src, src.transformed(motion), RigidTransform.identity())
    assert res.rmse < 0.01
    # the in-plane offset is unobservable, so the transform is not the motion
    assert not res.transform.allclose(motion, atol=1e-3)
    assert abs(res.transform.translation[2]) < 2e-3


def test_icp_is_symmetric():
    rng = np.random.default_rng(6)
    a = corner_fragment(rng, 1500, sigma=0.001)
    motion = se3_exp([0.01, 0.02, -0.01, 0.02, 0.01, -0.03])
    # an independent sampling of the same corner, moved
    b = corner_fragment(np.random.default_rng(9), 1500, sigma=0.001, fid=1).transformed(motion)
    T0 = se3_exp([0.005, 0, 0, 0.01, 0, 0])
    p = IcpParams(voxel_size=0.0)
    fwd = icp_point_to_plane(a, b, T0, p).transform
    bwd = icp_point_to_plane(b, a, T0.inverse(), p).transform
    prod = fwd @ bwd
    assert np.linalg.norm(prod.translation) < 1e-3
    ang = np.degrees(np.arccos(np.clip((np.trace(prod.rotation) - 1) / 2, -1, 1)))
    assert ang < 0.1


def test_residual_history_non_increasing_within_steps():
    rng = np.random.default_rng(8)
    src = corner_fragment(rng, 800, sigma=0.002)
    tgt = src.transformed(se3_exp([0.03, 0.0, 0.02, 0.04, 0.02, 0.0]))
    # with max_dist large enough that matches never drop, re-matching can only help
    res = icp_point_to_plane(src, tgt, RigidTransform.identity(), IcpParams(max_dist=0.5, voxel_size=0.0))
    h = np.array(res.rmse_history)
    assert np.all(np.diff(h) <= 1e-12)


def test_too_few_correspondences_raises(rng):
    a = _square(rng, 100, 0.0)
    b = _square(rng, 100, 10.0)
    with pytest.raises(InsufficientCorrespondences):
        icp_point_to_plane(a, b, RigidTransform.identity())


@given(st.integers(0, 2**31 - 1))
def test_point_to_plane_step_never_raises_cost(seed):
    """One linearise-solve-update on fixed matches does not raise the cost."""
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(30, 3))
    n = rng.normal(size=(30, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    q = p + rng.normal(scale=0.05, size=p.shape)
    T = se3_exp(rng.normal(size=6) * 0.05)
    r, J = point_to_plane_residuals(T, p, q, n)
    xi = np.linalg.lstsq(J.T @ J, -J.T @ r, rcond=None)[0]
    step = 1.0
    for _ in range(9):
        r1, _ = point_to_plane_residuals(se3_exp(step * xi) @ T, p, q, n)
        if r1 @ r1 <= r @ r:
            break
        step *= 0.5
    assert r1 @ r1 <= r @ r + 1e-15
