"""Layout-constrained global registration.

The energy over fragment poses ``T_i`` is

    E = E_layout + lambda1 * E_frag + lambda2 * E_pair

* ``E_layout``: ``sum ((T_i p - q) . R_i n_p)^2`` with ``q`` the projection of
  ``T_i p`` onto its nearest layout plane (a *virtual point*, fixed while the
  poses are refined).
* ``E_frag``: ``sum ((T_i p - T_j q) . R_i n_p)^2`` over point matches of the
  fragment pairs in ``I``.
* ``E_pair``: ``sum |T_i T~_ij - T_j|_1`` over the 3x4 entries, where ``T~_ij``
  is the pairwise estimate (odometry or loop closure).

Normals are the *source* normals rotated into the world, so every residual
depends on the rotation of the source fragment through the normal too.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import LayoutNotFound, NoPlanes, SingularSystem
from .geometry import RigidTransform, SpatialIndex, se3_exp, se3_log, voxel_downsample
from .icp import find_correspondences
from .layout import LayoutParams, estimate_layout
from .planes import PlaneExtractionParams, extract_fragment_planes

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegistrationConfig:
    # None means "derive from correspondence counts"
    lambda1: float | None = None
    lambda2: float | None = None
    layout_max_dist: float = 0.1
    pair_max_dist: float = 0.05
    normal_angle: float = np.deg2rad(30.0)
    inner_iters: int = 10
    outer_iters: int = 20
    convergence_eps: float = 1e-5
    use_layout: bool = True
    refresh_pairs: bool = False
    pair_voxel: float = 0.03
    l1_eps: float = 1e-6
    max_halvings: int = 8

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.inner_iters < 1 or self.outer_iters < 1:
            raise ValueError("iteration counts must be at least 1")


@dataclass(frozen=True)
class LayoutCorrespondence:
    fragment_id: int
    point_index: int
    virtual_point: np.ndarray
    point_normal: np.ndarray


@dataclass(frozen=True, eq=False)
class LayoutCorrespondences:
    """All layout matches of one fragment, stored column-wise."""

    fragment: int  # position of the fragment in the pose list
    point_index: np.ndarray
    virtual_points: np.ndarray  # world frame
    plane_index: np.ndarray
    points: np.ndarray  # fragment-local
    normals: np.ndarray  # fragment-local

    def __len__(self):
        return len(self.point_index)

    def __getitem__(self, k) -> LayoutCorrespondence:
        return LayoutCorrespondence(self.fragment, int(self.point_index[k]),
                                    self.virtual_points[k], self.normals[k])


@dataclass(frozen=True, eq=False)
class PairCorrespondences:
    i: int
    j: int
    source_index: np.ndarray  # into fragment i
    target_index: np.ndarray  # into fragment j
    p: np.ndarray  # fragment-i local points
    n: np.ndarray  # fragment-i local normals
    q: np.ndarray  # fragment-j local points

    def __len__(self):
        return len(self.source_index)


@dataclass(frozen=True)
class EnergyBreakdown:
    e_layout: float
    e_frag: float
    e_pair: float
    total: float


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    energy: EnergyBreakdown
    n_layout_planes: int
    fallback: bool = False


@dataclass(frozen=True, eq=False)
class JointResult:
    poses: tuple
    layout: object  # Layout or None
    trace: tuple
    pair_correspondences: tuple
    lambdas: tuple
    inner_energies: tuple = ()  # per outer iteration, totals after each inner step


# ---------------------------------------------------------------------------
# correspondences
# ---------------------------------------------------------------------------


def establish_pair_correspondences(fragments, poses, pairs, pair_max_dist=0.05,
                                   normal_angle=np.deg2rad(30.0), indexes=None,
                                   voxel=None) -> list:
    """Point matches for each pair ``(i, j)`` under the current poses.

    Source points come from fragment ``i``; ``voxel`` thins them first.
    """
    out = []
    for i, j in pairs:
        fi, fj = fragments[i], fragments[j]
        tree = indexes[j] if indexes is not None else SpatialIndex(fj.points)
        sub = voxel_downsample(fi.points, voxel) if voxel else None
        T = poses[j].inverse() @ poses[i]
        c = find_correspondences(fi, fj, T, pair_max_dist, normal_angle, target_index=tree,
                                 source_subset=sub)
        out.append(PairCorrespondences(i, j, c.source_index, c.target_index,
                                       fi.points[c.source_index], fi.normals[c.source_index],
                                       fj.points[c.target_index]))
    return out


def establish_layout_correspondences(fragment, pose: RigidTransform, layout_planes,
                                     layout_max_dist=0.1, normal_angle=np.deg2rad(30.0),
                                     position=None) -> LayoutCorrespondences:
    """Match points to their nearest layout plane.

    ``layout_planes`` is a list of :class:`~layoutreg.geometry.Plane` (or a
    layout with a ``planes`` attribute). Plane orientation is ignored when
    comparing normals.
    """
    planes = getattr(layout_planes, "planes", layout_planes)
    pos = fragment.id if position is None else position
    if len(planes) == 0 or len(fragment) == 0:
        empty = np.zeros((0, 3))
        return LayoutCorrespondences(pos, np.zeros(0, dtype=np.int64), empty, np.zeros(0, dtype=np.int64),
                                     empty, empty)
    N = np.array([p.normal for p in planes])
    d = np.array([p.offset for p in planes])
    x = pose.apply(fragment.points)
    sd = x @ N.T + d
    k = np.argmin(np.abs(sd), axis=1)
    rows = np.arange(len(x))
    s = sd[rows, k]
    m = pose.rotate(fragment.normals)
    cos = np.abs(np.einsum("ij,ij->i", m, N[k]))
    ok = (np.abs(s) <= layout_max_dist) & (cos >= np.cos(normal_angle))
    idx = rows[ok]
    q = x[ok] - s[ok, None] * N[k[ok]]
    return LayoutCorrespondences(pos, idx, q, k[ok], fragment.points[idx], fragment.normals[idx])


# ---------------------------------------------------------------------------
# residuals and Jacobians (left twists [omega; v] on each pose)
# ---------------------------------------------------------------------------


def layout_residuals(T: RigidTransform, lc: LayoutCorrespondences):
    """Residuals ``(T p - q) . R n`` and their ``(K, 6)`` Jacobian."""
    x = T.apply(lc.points)
    m = T.rotate(lc.normals)
    q = lc.virtual_points
    r = np.einsum("ij,ij->i", x - q, m)
    J = np.hstack([np.cross(q, m), m])
    return r, J


def frag_residuals(Ti: RigidTransform, Tj: RigidTransform, pc: PairCorrespondences):
    """Residuals ``(Ti p - Tj q) . Ri n`` and Jacobians for ``Ti`` and ``Tj``."""
    x = Ti.apply(pc.p)
    y = Tj.apply(pc.q)
    m = Ti.rotate(pc.n)
    r = np.einsum("ij,ij->i", x - y, m)
    Ji = np.hstack([np.cross(y, m), m])
    return r, Ji, -Ji


def pair_residuals(Ti: RigidTransform, Tj: RigidTransform, T_ij: RigidTransform):
    """Entries of the 3x4 matrix ``Ti T~ij - Tj`` (row-major) and Jacobians."""
    A = Ti @ T_ij
    e = (A.as_3x4() - Tj.as_3x4()).ravel()
    return e, _entry_jacobian(A), -_entry_jacobian(Tj)


def _entry_jacobian(T: RigidTransform):
    # d(R)/d(omega) column k is -[r_k]x; d(t) = -[t]x omega + v
    J = np.zeros((3, 4, 6))
    cols = [T.rotation[:, k] for k in range(3)] + [T.translation]
    for k, c in enumerate(cols):
        J[:, k, :3] = -_skew(c)
    J[:, 3, 3:] = np.eye(3)
    return J.reshape(12, 6)


def _skew(w):
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


# ---------------------------------------------------------------------------
# energy and Gauss-Newton
# ---------------------------------------------------------------------------


def energy(poses, pair_corrs, layout_corrs, pair_transforms, lambda1, lambda2) -> EnergyBreakdown:
    """Evaluate the three terms and the weighted total.

    ``pair_transforms`` maps ``(i, j)`` to ``T~_ij``; ``layout_corrs`` is a
    list of :class:`LayoutCorrespondences`.
    """
    e_layout = 0.0
    for lc in layout_corrs:
        if len(lc):
            r, _ = layout_residuals(poses[lc.fragment], lc)
            e_layout += float(r @ r)
    e_frag = 0.0
    for pc in pair_corrs:
        if len(pc):
            r = frag_residuals(poses[pc.i], poses[pc.j], pc)[0]
            e_frag += float(r @ r)
    e_pair = 0.0
    for (i, j), T in pair_transforms.items():
        e_pair += float(np.sum(np.abs(pair_residuals(poses[i], poses[j], T)[0])))
    total = e_layout + lambda1 * e_frag + lambda2 * e_pair
    return EnergyBreakdown(e_layout, e_frag, e_pair, total)


def _accumulate(H, g, blocks, r, w):
    for a, Ja in blocks:
        if a == 0:
            continue
        sa = slice(6 * (a - 1), 6 * a)
        g[sa] += Ja.T @ (w * r)
        for b, Jb in blocks:
            if b == 0:
                continue
            sb = slice(6 * (b - 1), 6 * b)
            H[sa, sb] += Ja.T @ (w[:, None] * Jb)


def normal_equations(poses, pair_corrs, layout_corrs, pair_transforms, lambda1, lambda2, l1_eps=1e-6):
    """Half-Hessian and half-gradient of the energy with pose 0 held fixed.

    The L1 term is replaced by its reweighted quadratic model
    ``e^2 / (2 max(|e0|, eps))`` around the current entries.
    """
    n = len(poses)
    H = np.zeros((6 * (n - 1), 6 * (n - 1)))
    g = np.zeros(6 * (n - 1))
    for lc in layout_corrs:
        if len(lc):
            r, J = layout_residuals(poses[lc.fragment], lc)
            _accumulate(H, g, [(lc.fragment, J)], r, np.ones(len(r)))
    if lambda1 > 0:
        for pc in pair_corrs:
            if len(pc):
                r, Ji, Jj = frag_residuals(poses[pc.i], poses[pc.j], pc)
                _accumulate(H, g, [(pc.i, Ji), (pc.j, Jj)], r, np.full(len(r), lambda1))
    if lambda2 > 0:
        for (i, j), T in pair_transforms.items():
            e, Ji, Jj = pair_residuals(poses[i], poses[j], T)
            w = lambda2 / (2.0 * np.maximum(np.abs(e), l1_eps))
            _accumulate(H, g, [(i, Ji), (j, Jj)], e, w)
    return H, g


def _solve(H, g):
    if H.size == 0:
        return np.zeros(0)
    scale = max(float(np.max(np.diag(H))), 1e-300)
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        raise SingularSystem("registration normal equations are rank deficient") from None
    if np.min(np.diag(L)) ** 2 < 1e-14 * scale:
        raise SingularSystem("registration normal equations are ill-conditioned")
    y = np.linalg.solve(L, -g)
    return np.linalg.solve(L.T, y)


def _apply(poses, dx, step):
    out = [poses[0]]
    for k in range(1, len(poses)):
        out.append(se3_exp(step * dx[6 * (k - 1):6 * k]) @ poses[k])
    return out


def gauss_newton_step(poses, pair_corrs, layout_corrs, pair_transforms, lambda1, lambda2,
                      max_halvings=8, l1_eps=1e-6):
    """One damped Gauss-Newton update of all poses but pose 0.

    The step is halved until the energy does not increase; after
    ``max_halvings`` failed halvings the poses are returned unchanged.

    Returns ``(poses, EnergyBreakdown, step_vector)``.

    Raises:
        SingularSystem: the poses are not constrained.
    """
    poses = list(poses)
    e0 = energy(poses, pair_corrs, layout_corrs, pair_transforms, lambda1, lambda2)
    H, g = normal_equations(poses, pair_corrs, layout_corrs, pair_transforms, lambda1, lambda2, l1_eps)
    dx = _solve(H, g)
    step = 1.0
    for _ in range(max_halvings + 1):
        cand = _apply(poses, dx, step)
        e1 = energy(cand, pair_corrs, layout_corrs, pair_transforms, lambda1, lambda2)
        if e1.total <= e0.total:
            return cand, e1, step * dx
        step *= 0.5
    return poses, e0, np.zeros_like(dx)


def default_lambdas(n_layout, n_frag, n_pairs):
    """Weights that bring the three terms to comparable magnitudes.

    Without layout correspondences the fragment term takes over as the
    reference count.
    """
    ref = n_layout if n_layout > 0 else n_frag
    lam1 = ref / n_frag if n_frag > 0 else 0.0
    lam2 = ref / (100.0 * n_pairs) if n_pairs > 0 else 0.0
    if n_layout == 0 and n_frag == 0:
        lam2 = 1.0
    return lam1, lam2


def _pose_change(a, b):
    worst = 0.0
    for Ta, Tb in zip(a, b):
        xi = se3_log(Tb @ Ta.inverse())
        worst = max(worst, float(np.linalg.norm(xi[3:])), float(np.linalg.norm(xi[:3])))
    return worst


def joint_optimize(fragments, initial_poses, pair_transforms, config: RegistrationConfig | None = None,
                   plane_params: PlaneExtractionParams | None = None,
                   layout_params: LayoutParams | None = None, labelings=None) -> JointResult:
    """Alternate layout estimation and pose refinement.

    ``pair_transforms`` maps each pair ``(i, j)`` in ``I`` to ``T~_ij`` with
    ``T_j ~ T_i T~_ij``. Pair correspondences are built once from
    ``initial_poses`` unless ``config.refresh_pairs`` is set. Plane labelings
    are fragment-local, so they are computed once (or taken from
    ``labelings``).

    If no layout can be found in some outer iteration, that iteration keeps
    the poses it started with and its trace row is flagged; when this happens
    on the first iteration the pose-graph poses are returned.
    """
    config = config or RegistrationConfig()
    layout_params = layout_params or LayoutParams()
    poses = list(initial_poses)
    pairs = sorted(pair_transforms)
    indexes = [SpatialIndex(f.points) for f in fragments]
    pair_corrs = establish_pair_correspondences(fragments, poses, pairs, config.pair_max_dist,
                                                config.normal_angle, indexes, config.pair_voxel)
    if config.use_layout and labelings is None:
        labelings = [extract_fragment_planes(f, plane_params) for f in fragments]
    layout = None
    trace, inner = [], []
    lambdas = (0.0, 0.0)
    for it in range(1, config.outer_iters + 1):
        if config.refresh_pairs and it > 1:
            pair_corrs = establish_pair_correspondences(fragments, poses, pairs, config.pair_max_dist,
                                                        config.normal_angle, indexes, config.pair_voxel)
        layout_corrs = []
        fallback = False
        n_planes = 0
        if config.use_layout:
            try:
                layout, _ = estimate_layout(labelings, poses, fragments, layout_params)
            except (NoPlanes, LayoutNotFound) as exc:
                fallback = True
                logger.warning("outer iteration %d: %s", it, exc)
            else:
                n_planes = len(layout.planes)
                layout_corrs = [
                    establish_layout_corrs_for(f, poses[k], layout, config, k) for k, f in enumerate(fragments)
                ]
        n_layout = sum(len(c) for c in layout_corrs)
        n_frag = sum(len(c) for c in pair_corrs)
        auto = default_lambdas(n_layout, n_frag, len(pairs))
        lam1 = auto[0] if config.lambda1 is None else config.lambda1
        lam2 = auto[1] if config.lambda2 is None else config.lambda2
        lambdas = (lam1, lam2)
        if fallback:
            e = energy(poses, pair_corrs, [], pair_transforms, lam1, lam2)
            trace.append(TraceRow(it, e, 0, True))
            inner.append((e.total,))
            if it == 1:
                break
            continue
        start = poses
        totals = [energy(poses, pair_corrs, layout_corrs, pair_transforms, lam1, lam2).total]
        e = None
        for _ in range(config.inner_iters):
            poses, e, dx = gauss_newton_step(poses, pair_corrs, layout_corrs, pair_transforms, lam1, lam2,
                                             config.max_halvings, config.l1_eps)
            totals.append(e.total)
            if not np.any(dx):
                break
        inner.append(tuple(totals))
        trace.append(TraceRow(it, e, n_planes, False))
        change = _pose_change(start, poses)
        logger.info("outer %d: total %.6g, max pose change %.3g", it, e.total, change)
        if change < config.convergence_eps:
            break
    return JointResult(tuple(poses), layout, tuple(trace), tuple(pair_corrs), lambdas, tuple(inner))


def establish_layout_corrs_for(fragment, pose, layout, config: RegistrationConfig, position):
    return establish_layout_correspondences(fragment, pose, layout.planes, config.layout_max_dist,
                                            config.normal_angle, position=position)


def format_trace(trace) -> str:
    """Trace rows as ``iter e_layout e_frag e_pair total n_layout_planes``."""
    lines = ["iter e_layout e_frag e_pair total n_layout_planes"]
    for row in trace:
        e = row.energy
        tag = " fallback" if row.fallback else ""
        vals = " ".join(repr(float(v)) for v in (e.e_layout, e.e_frag, e.e_pair, e.total))
        lines.append(f"{row.iteration} {vals} {row.n_layout_planes}{tag}")
    return "".join(s + "\n" for s in lines)
