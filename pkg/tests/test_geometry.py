import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from layoutreg.errors import DegenerateInput
from layoutreg.geometry import (
    Plane,
    RigidTransform,
    SpatialIndex,
    adjoint,
    apply_transform,
    compose,
    fit_plane_ls,
    inverse,
    orient_plane,
    plane_through,
    point_plane_distance,
    se3_exp,
    se3_log,
    se3_right_jacobian_inv,
    so3_exp,
    so3_log,
    voxel_downsample,
)

finite = st.floats(-5, 5, allow_nan=False)
vec3 = arrays(np.float64, 3, elements=finite)
small_rot = arrays(np.float64, 3, elements=st.floats(-1.8, 1.8))


def twist():
    return st.tuples(small_rot, vec3).map(lambda t: np.r_[t[0], t[1]])


def test_point_plane_distance_examples():
    assert point_plane_distance(Plane([0, 0, 1], -1), [0, 0, 1]) == 0.0
    assert point_plane_distance(Plane([0, 0, 1], -1), [0, 0, 0]) == 1.0
    assert point_plane_distance(Plane([0.6, 0.8, 0], 0.2), [0, 0, 0]) == pytest.approx(0.2)


def test_plane_normalises_and_rejects_zero():
    p = Plane([0, 0, 2], -2)
    assert np.allclose(p.normal, [0, 0, 1]) and p.offset == -1.0
    with pytest.raises(DegenerateInput):
        Plane([0, 0, 0], 1.0)


def test_apply_transform_examples():
    assert np.allclose(apply_transform(RigidTransform.identity(), [1, 2, 3]), [1, 2, 3])
    assert np.allclose(apply_transform(RigidTransform.from_translation(0, 0, 1), [1, 2, 3]), [1, 2, 4])
    Rz = RigidTransform.from_axis_angle([0, 0, 1], np.pi / 2)
    assert np.allclose(apply_transform(Rz, [1, 0, 0]), [0, 1, 0])


def test_compose_examples(rng):
    T = se3_exp(rng.normal(size=6))
    assert compose(T, RigidTransform.identity()).allclose(T)
    assert compose(T, inverse(T)).allclose(RigidTransform.identity())
    a = RigidTransform.from_translation(0, 0, 1)
    b = RigidTransform.from_translation(0, 0, 2)
    assert compose(a, b).allclose(RigidTransform.from_translation(0, 0, 3))


def test_compose_order_applies_right_first():
    R = RigidTransform.from_axis_angle([0, 0, 1], np.pi / 2)
    t = RigidTransform.from_translation(1, 0, 0)
    # translate then rotate: (0,0,0) -> (1,0,0) -> (0,1,0)
    assert np.allclose(compose(R, t).apply([0, 0, 0]), [0, 1, 0])


def test_se3_exp_examples():
    assert se3_exp(np.zeros(6)).allclose(RigidTransform.identity())
    assert se3_exp([0, 0, 0, 1, 0, 0]).allclose(RigidTransform.from_translation(1, 0, 0))
    assert se3_exp([0, 0, np.pi / 2, 0, 0, 0]).allclose(RigidTransform.from_axis_angle([0, 0, 1], np.pi / 2))


def test_se3_exp_matches_matrix_exponential(rng):
    from scipy.linalg import expm

    for _ in range(20):
        xi = rng.normal(size=6)
        w, v = xi[:3], xi[3:]
        M = np.zeros((4, 4))
        M[:3, :3] = [[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]]
        M[:3, 3] = v
        assert np.allclose(se3_exp(xi).as_matrix(), expm(M), atol=1e-12)


def test_small_angle_branch_is_continuous():
    for eps in (1e-7, 1e-8, 1e-9, 1e-12):
        xi = np.array([eps, -eps, eps / 2, 0.3, -0.2, 0.1])
        T = se3_exp(xi)
        assert np.allclose(se3_log(T), xi, atol=1e-15)


@given(twist())
def test_se3_log_exp_round_trip(xi):
    if np.linalg.norm(xi[:3]) >= np.pi - 1e-3:
        return
    assert np.allclose(se3_log(se3_exp(xi)), xi, atol=1e-9)


@given(small_rot)
def test_so3_round_trip(w):
    if np.linalg.norm(w) >= np.pi - 1e-3:
        return
    R = so3_exp(w)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
    assert np.allclose(so3_log(R), w, atol=1e-9)


@given(twist(), vec3, vec3)
def test_point_plane_distance_rigid_invariance(xi, n, p):
    if np.linalg.norm(n) < 1e-3:
        return
    plane = Plane(n, 0.7)
    T = se3_exp(xi)
    d0 = point_plane_distance(plane, p)
    d1 = point_plane_distance(plane.transformed(T), T.apply(p))
    assert abs(d0 - d1) < 1e-9


@given(twist(), twist())
def test_adjoint_identity(a, b):
    # T exp(xi) T^-1 == exp(Ad_T xi)
    T = se3_exp(a)
    xi = 0.1 * b
    lhs = T @ se3_exp(xi) @ T.inverse()
    assert lhs.allclose(se3_exp(adjoint(T) @ xi), atol=1e-9)


def test_right_jacobian_inverse_matches_fd(rng):
    # d/d(delta) log(exp(xi) exp(delta)) at 0 equals Jr^-1(xi)
    for _ in range(10):
        xi = rng.normal(size=6) * 0.8
        T = se3_exp(xi)
        J = np.zeros((6, 6))
        h = 1e-6
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            J[:, k] = (se3_log(T @ se3_exp(d)) - se3_log(T @ se3_exp(-d))) / (2 * h)
        assert np.allclose(J, se3_right_jacobian_inv(xi), atol=1e-6)


def test_fit_plane_examples():
    p = fit_plane_ls([[0, 0, 2], [1, 0, 2], [0, 1, 2], [1, 1, 2]])
    assert np.allclose(np.abs(p.normal), [0, 0, 1])
    assert p.offset == pytest.approx(-2.0 * p.normal[2])
    p = fit_plane_ls([[0, 0, 0], [1, 0, 0], [0, 1, 0]])
    assert np.allclose(np.abs(p.normal), [0, 0, 1]) and abs(p.offset) < 1e-15


def test_fit_plane_noisy_against_svd_oracle():
    rng = np.random.default_rng(7)
    pts = np.column_stack([np.full(100, 5.0), rng.random(100) * 2, rng.random(100) * 2])
    pts[:, 0] += rng.normal(scale=0.01, size=100)
    p = fit_plane_ls(pts)
    # oracle: right singular vector of the centred data with smallest singular value
    c = pts.mean(axis=0)
    n_svd = np.linalg.svd(pts - c)[2][-1]
    assert abs(abs(p.normal @ n_svd) - 1.0) < 1e-12
    assert np.degrees(np.arccos(min(1.0, abs(p.normal[0])))) < 1.0
    assert abs(abs(p.offset) - 5.0) < 0.01


def test_fit_plane_orientation_and_errors():
    pts = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]
    assert fit_plane_ls(pts, viewpoint=[0, 0, -3]).normal[2] < 0
    assert fit_plane_ls(pts, viewpoint=[0, 0, 3]).normal[2] > 0
    with pytest.raises(DegenerateInput):
        fit_plane_ls([[0, 0, 0], [1, 1, 1]])
    with pytest.raises(DegenerateInput):
        fit_plane_ls([[0, 0, 0], [1, 1, 1], [2, 2, 2], [3, 3, 3]])


@given(twist(), st.integers(3, 40), st.integers(0, 2**31))
def test_fit_plane_exact_input(xi, n, seed):
    rng = np.random.default_rng(seed)
    truth = Plane([0, 0, 1], 0.0).transformed(se3_exp(xi))
    pts = truth.project(rng.normal(size=(n, 3)))
    try:
        p = fit_plane_ls(pts)
    except DegenerateInput:
        return
    assert np.max(p.distance(pts)) < 1e-12 * max(1.0, np.abs(pts).max())
    assert abs(abs(p.normal @ truth.normal) - 1.0) < 1e-12


def test_plane_through_and_orient():
    assert plane_through([0, 0, 0], [1, 1, 1], [2, 2, 2]) is None
    p = plane_through([0, 0, 1], [1, 0, 1], [0, 1, 1])
    assert np.allclose(p.normal, [0, 0, 1]) and p.offset == pytest.approx(-1)
    assert orient_plane(p, [0, 0, 0]).normal[2] == -1.0


@pytest.mark.parametrize("k", [1, 8, 16])
def test_spatial_index_knn_matches_brute_force(k):
    rng = np.random.default_rng(k)
    pts = rng.random((2000, 3))
    q = rng.random((50, 3))
    dist, idx = SpatialIndex(pts).knn(q, k)
    full = np.linalg.norm(q[:, None] - pts[None], axis=2)
    ref = np.sort(full, axis=1)[:, :k]
    assert np.allclose(dist, ref)
    assert np.allclose(np.take_along_axis(full, idx, axis=1), ref)


def test_spatial_index_radius_and_empty():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0.1, 0, 0]], float)
    idx = SpatialIndex(pts)
    assert idx.radius([0, 0, 0], 0.5).tolist() == [0, 2]
    d, i = idx.knn([[0, 0, 0]], 3, max_dist=0.5)
    assert i[0, :2].tolist() == [0, 2]
    assert np.isinf(d[0, 2]) and i[0, 2] == len(pts)
    empty = SpatialIndex(np.zeros((0, 3)))
    d, _ = empty.nearest([[0, 0, 0]])
    assert np.isinf(d[0])


def test_voxel_downsample_one_per_voxel():
    rng = np.random.default_rng(3)
    pts = rng.random((5000, 3))
    idx = voxel_downsample(pts, 0.25)
    keys = np.floor(pts[idx] / 0.25).astype(int)
    assert len(np.unique(keys, axis=0)) == len(idx) == 64
    assert np.all(np.diff(idx) > 0)
    assert np.array_equal(idx, voxel_downsample(pts, 0.25))
