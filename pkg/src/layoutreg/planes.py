"""Per-fragment plane extraction.

Pipeline: voxel-seeded oversegmentation -> three-centroid plane hypotheses ->
agglomerative clustering of segments by mean point-to-plane distance ->
multi-label graph-cut assignment with a null label.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, NoPlanes
from .geometry import Plane, SpatialIndex, fit_plane_ls, plane_through, voxel_downsample
from .maxflow import FlowGraph

logger = logging.getLogger(__name__)

NULL = -1


@dataclass(frozen=True)
class EnergyParams:
    potts_weight: float = 0.02
    null_cost: float = 0.05
    neighbor_k: int = 8
    neighbor_radius: float = 0.15

    def __post_init__(self):
        if not (self.potts_weight > 0 and self.null_cost > 0):
            raise ValueError("potts_weight and null_cost must be positive")


@dataclass(frozen=True)
class PlaneExtractionParams:
    voxel_size: float = 0.08
    seed_resolution: float = 0.25
    seed_normal_angle: float = np.deg2rad(30.0)
    merge_threshold: float = 0.05
    min_support: int = 50
    energy: EnergyParams = field(default_factory=EnergyParams)
    assign_rounds: int = 2
    max_cycles: int = 10


@dataclass(frozen=True, eq=False)
class Segment:
    point_indices: np.ndarray
    centroid: np.ndarray
    adjacency: tuple


@dataclass(frozen=True, eq=False)
class PlaneLabeling:
    """Per-point plane ids (``NULL`` = -1 for outliers) and the live planes."""

    labels: np.ndarray
    planes: tuple
    energy_trace: tuple = ()

    def inliers(self, k):
        return np.flatnonzero(self.labels == k)

    def support(self):
        return np.bincount(self.labels[self.labels >= 0], minlength=len(self.planes))


# ---------------------------------------------------------------------------
# oversegmentation
# ---------------------------------------------------------------------------


def oversegment(fragment, seed_resolution=0.25, normal_angle=np.deg2rad(30.0),
                adjacency_radius=None) -> list:
    """Split a fragment into compact segments by voxel-seeded growth.

    Seeds are the points closest to the centroids of occupied
    ``seed_resolution`` voxels. Every point joins the nearest seed within
    ``1.5 * seed_resolution`` whose normal agrees within ``normal_angle``;
    points left over are reseeded among themselves until all are assigned.
    Two segments are adjacent when they have points closer than
    ``adjacency_radius`` (default ``seed_resolution / 2``).
    """
    pts = fragment.points
    nrm = fragment.normals
    n = len(pts)
    reach = 1.5 * seed_resolution
    cos_gate = np.cos(normal_angle)
    owner = np.full(n, -1, dtype=np.int64)
    n_seg = 0
    remaining = np.arange(n)
    while len(remaining):
        seeds = remaining[voxel_downsample(pts[remaining], seed_resolution)]
        tree = SpatialIndex(pts[seeds])
        k = min(8, len(seeds))
        dist, idx = tree.knn(pts[remaining], k, max_dist=reach)
        chosen = np.full(len(remaining), -1, dtype=np.int64)
        for col in range(k):
            valid = np.isfinite(dist[:, col]) & (chosen < 0)
            if not valid.any():
                continue
            cand = np.where(valid, idx[:, col], 0)
            agree = np.einsum("ij,ij->i", nrm[remaining], nrm[seeds[cand]]) >= cos_gate
            take = valid & agree
            chosen[take] = cand[take]
        # seeds always own themselves
        seed_pos = np.searchsorted(remaining, seeds)
        chosen[seed_pos] = np.arange(len(seeds))
        done = chosen >= 0
        owner[remaining[done]] = chosen[done] + n_seg
        n_seg += len(seeds)
        remaining = remaining[~done]
    # relabel to consecutive ids ordered by first point index
    _, first = np.unique(owner, return_index=True)
    order = np.argsort(first)
    remap = np.empty(n_seg, dtype=np.int64)
    used = np.unique(owner)
    remap[used[order]] = np.arange(len(used))
    owner = remap[owner]
    n_seg = len(used)

    adj = [set() for _ in range(n_seg)]
    radius = seed_resolution / 2.0 if adjacency_radius is None else adjacency_radius
    if n > 1:
        tree = SpatialIndex(pts)
        dist, idx = tree.knn(pts, min(9, n), max_dist=radius)
        rows = np.repeat(np.arange(n), idx.shape[1])
        cols = idx.reshape(-1)
        ok = np.isfinite(dist.reshape(-1))
        a, b = owner[rows[ok]], owner[cols[ok]]
        diff = a != b
        for u, v in set(zip(a[diff].tolist(), b[diff].tolist())):
            adj[u].add(v)
            adj[v].add(u)
    segments = []
    order = np.argsort(owner, kind="stable")
    bounds = np.searchsorted(owner[order], np.arange(n_seg + 1))
    for s in range(n_seg):
        members = np.sort(order[bounds[s]:bounds[s + 1]])
        segments.append(Segment(members, pts[members].mean(axis=0), tuple(sorted(adj[s]))))
    return segments


# ---------------------------------------------------------------------------
# hypotheses and clustering
# ---------------------------------------------------------------------------


def _hypothesis_arrays(segments, fragment):
    """Normals, offsets and segment triples of all connected-triple planes."""
    seen = set()
    keys = []
    for k, seg in enumerate(segments):
        nb = seg.adjacency
        for x in range(len(nb)):
            for y in range(x + 1, len(nb)):
                key = tuple(sorted((k, nb[x], nb[y])))
                if key not in seen:
                    seen.add(key)
                    keys.append(key)
    tri = np.array(keys, dtype=np.int64).reshape(-1, 3)
    cen = np.array([s.centroid for s in segments]).reshape(-1, 3)
    a, b, c = cen[tri[:, 0]], cen[tri[:, 1]], cen[tri[:, 2]]
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n, axis=1)
    scale = np.maximum(np.linalg.norm(b - a, axis=1) * np.linalg.norm(c - a, axis=1), 1e-300)
    ok = norm > 1e-9 * scale
    n = n[ok] / norm[ok, None]
    d = -np.einsum("ij,ij->i", n, a[ok])
    flip = n @ fragment.sensor_origin + d < 0
    n[flip] *= -1.0
    d[flip] *= -1.0
    return n, d, tri[ok]


def sample_hypotheses(segments, fragment, return_triples=False):
    """One plane per connected segment triple (a segment and two neighbours).

    Collinear triples are skipped and each unordered triple is used once.
    Planes are oriented towards the fragment's sensor origin.
    """
    n, d, tri = _hypothesis_arrays(segments, fragment)
    planes = [Plane(nk, dk) for nk, dk in zip(n, d)]
    triples = [tuple(t) for t in tri.tolist()]
    return (planes, triples) if return_triples else planes


def segment_plane_cost(plane: Plane, segment: Segment, fragment) -> float:
    """Mean point-to-plane distance over the segment's points."""
    return float(np.mean(plane.distance(fragment.points[segment.point_indices])))


@dataclass(frozen=True, eq=False)
class HacResult:
    planes: list
    groups: list  # input hypothesis indices per output plane
    support: list  # stacked support points per output plane


def _sym3_eig(S):
    """Ascending eigenvalues and the smallest eigenvector of symmetric 3x3
    matrices, in closed form (trigonometric roots, cross-product vectors)."""
    scale = np.maximum(np.trace(S, axis1=1, axis2=2) / 3.0, 1e-300)
    A = S / scale[:, None, None]
    q = np.trace(A, axis1=1, axis2=2) / 3.0
    B = A - q[:, None, None] * np.eye(3)
    p = np.sqrt(np.einsum("nij,nij->n", B, B) / 6.0)
    safe = np.where(p > 0, p, 1.0)
    r = np.clip(np.linalg.det(B / safe[:, None, None]) / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    l3 = q + 2 * p * np.cos(phi)
    l1 = q + 2 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    l2 = 3 * q - l1 - l3
    M = A - l1[:, None, None] * np.eye(3)
    c = np.stack([np.cross(M[:, 0], M[:, 1]), np.cross(M[:, 0], M[:, 2]), np.cross(M[:, 1], M[:, 2])], axis=1)
    nrm = np.linalg.norm(c, axis=2)
    pick = np.argmax(nrm, axis=1)
    rows = np.arange(len(S))
    v = c[rows, pick] / np.maximum(nrm[rows, pick], 1e-300)[:, None]
    evals = np.column_stack([l1, l2, l3]) * scale[:, None]
    return evals, v


def _fit_from_stats(cnt, s1, s2, rel_tol=1e-12):
    """Batched LS planes from count, sum and second-moment sums."""
    mean = s1 / cnt[:, None]
    scatter = s2 - cnt[:, None, None] * np.einsum("ni,nj->nij", mean, mean)
    evals, normals = _sym3_eig(scatter)
    offsets = -np.einsum("ni,ni->n", normals, mean)
    bad = (cnt < 3) | (evals[:, 1] <= rel_tol * np.maximum(evals[:, 2], 1e-300))
    return normals, offsets, bad


def hac_cluster(hypotheses, support, merge_threshold=0.05, return_groups=False):
    """Greedy agglomerative merging of plane hypotheses.

    Repeatedly merges the pair whose union of support points is best explained
    by its least-squares plane (lowest mean point distance), until the best such
    cost exceeds ``merge_threshold``. Merged planes are refit with
    :func:`fit_plane_ls`; unmerged hypotheses are returned unchanged. Ties go
    to the lowest index pair.
    """
    n = len(hypotheses)
    if len(support) != n:
        raise ValueError("need one support group per hypothesis")
    pts = [np.asarray(s, dtype=float).reshape(-1, 3) for s in support]
    planes = list(hypotheses)
    groups = [[k] for k in range(n)]
    alive = np.ones(n, dtype=bool)
    cnt = np.array([len(p) for p in pts], dtype=float)
    s1 = np.array([p.sum(axis=0) for p in pts]).reshape(n, 3)
    s2 = np.array([p.T @ p for p in pts]).reshape(n, 3, 3)
    # orientation reference: support-weighted normal sum
    ref = np.array([len(p) * pl.normal for p, pl in zip(pts, planes)]).reshape(n, 3)
    if n == 0:
        return HacResult([], [], []) if return_groups else []
    all_pts = np.vstack(pts) if cnt.sum() else np.zeros((0, 3))
    owner = np.repeat(np.arange(n), cnt.astype(int))

    cost = np.full((n, n), np.inf)

    def costs_against(a, lo=0):
        """Mean distance of union(a, b) to its LS plane, for every live b >= lo."""
        out = np.full(n, np.inf)
        live = np.flatnonzero(alive)
        live = live[(live != a) & (live >= lo)]
        if len(live) == 0:
            return out
        c = cnt[a] + cnt[live]
        normals, offsets, bad = _fit_from_stats(c, s1[a] + s1[live], s2[a] + s2[live])
        slot = np.full(n, -1, dtype=np.int64)
        slot[live] = np.arange(len(live))
        # a's points against every merged plane
        da = np.abs(pts[a] @ normals.T + offsets).sum(axis=0) if len(pts[a]) else np.zeros(len(live))
        # each other point against its own merged plane
        sel = slot[owner] >= 0
        o = slot[owner[sel]]
        db = np.abs(np.einsum("ij,ij->i", all_pts[sel], normals[o]) + offsets[o])
        db = np.bincount(o, weights=db, minlength=len(live))
        vals = (da + db) / np.maximum(c, 1.0)
        vals[bad] = np.inf
        out[live] = vals
        return out

    for a in range(n):
        cost[a] = costs_against(a, lo=a + 1)
    cost = np.minimum(cost, cost.T)
    np.fill_diagonal(cost, np.inf)
    while alive.sum() > 1:
        # cost is symmetric, so the first row-major minimum has a < b
        flat = int(np.argmin(cost))
        a, b = divmod(flat, n)
        if not cost[a, b] <= merge_threshold:
            break
        # merge b into a
        pts[a] = np.vstack([pts[a], pts[b]])
        pts[b] = np.zeros((0, 3))
        cnt[a] += cnt[b]
        cnt[b] = 0
        s1[a] += s1[b]
        s2[a] += s2[b]
        ref[a] += ref[b]
        groups[a] = sorted(groups[a] + groups[b])
        groups[b] = []
        alive[b] = False
        owner[owner == b] = a
        pl = fit_plane_ls(pts[a])
        if pl.normal @ ref[a] < 0:
            pl = pl.flipped()
        planes[a] = pl
        cost[b, :] = np.inf
        cost[:, b] = np.inf
        row = costs_against(a)
        cost[a, :] = row
        cost[:, a] = row
    keep = np.flatnonzero(alive)
    res = HacResult([planes[k] for k in keep], [groups[k] for k in keep], [pts[k] for k in keep])
    return res if return_groups else res.planes


# ---------------------------------------------------------------------------
# graph-cut assignment
# ---------------------------------------------------------------------------


def neighbor_pairs(points, k=8, radius=0.15) -> np.ndarray:
    """Unique undirected pairs ``(p, q)``, ``p < q``, among k-NN within radius."""
    n = len(points)
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    tree = SpatialIndex(points)
    dist, idx = tree.knn(points, min(k + 1, n), max_dist=radius)
    rows = np.repeat(np.arange(n), idx.shape[1])
    cols = idx.reshape(-1)
    ok = np.isfinite(dist.reshape(-1)) & (rows != cols)
    a, b = rows[ok], cols[ok]
    pairs = np.column_stack([np.minimum(a, b), np.maximum(a, b)])
    return np.unique(pairs, axis=0)


def data_costs(points, planes, null_cost):
    """``(N, L+1)`` data term; the last column is the null label."""
    D = np.empty((len(points), len(planes) + 1))
    for k, pl in enumerate(planes):
        D[:, k] = pl.distance(points)
    D[:, -1] = null_cost
    return D


def labeling_energy(labels, D, pairs, potts_weight):
    """Energy of a labeling given in internal ids (null = last column)."""
    e = D[np.arange(len(labels)), labels].sum()
    if len(pairs):
        e += potts_weight * np.count_nonzero(labels[pairs[:, 0]] != labels[pairs[:, 1]])
    return float(e)


def expansion_move(labels, alpha, D, pairs, w):
    """Optimal alpha-expansion of ``labels`` by one s-t min cut.

    Variable ``x_p = 1`` means "switch to alpha" (sink side). Points already
    labelled ``alpha`` stay out of the cut; their pair terms become unary.
    """
    n = len(labels)
    free = labels != alpha
    node = np.full(n, -1, dtype=np.int64)
    node[free] = np.arange(int(free.sum()))
    fidx = np.flatnonzero(free)
    u0 = D[fidx, labels[fidx]].copy()
    u1 = D[fidx, alpha].copy()
    g = FlowGraph(len(fidx))
    if len(pairs):
        p, q = pairs[:, 0], pairs[:, 1]
        fp, fq = free[p], free[q]
        # E(0,0)=A, E(0,1)=B, E(1,0)=C, E(1,1)=0
        lp, lq = labels[p], labels[q]
        both = fp & fq
        pb, qb = p[both], q[both]
        A = w * (lp[both] != lq[both])
        B = w * (lp[both] != alpha)
        C = w * (alpha != lq[both])
        # E = A + (C-A) x_p + (0-C) x_q + (B+C-A) (1-x_p) x_q
        np.add.at(u1, node[pb], C - A)
        np.add.at(u1, node[qb], -C)
        W = B + C - A
        keep = W > 0
        g.add_edges(node[pb[keep]], node[qb[keep]], W[keep])
        # one end already alpha: the other pays w unless it switches
        only_p = fp & ~fq
        np.add.at(u0, node[p[only_p]], w)
        only_q = fq & ~fp
        np.add.at(u0, node[q[only_q]], w)
    delta = u1 - u0
    if not np.any(delta < 0.0):
        # with non-negative pair weights, staying put is optimal
        return labels.copy()
    ids = np.arange(len(fidx))
    g.add_tedges(ids, np.maximum(delta, 0.0), np.maximum(-delta, 0.0))
    g.maxflow()
    out = labels.copy()
    out[fidx[~g.source_side()]] = alpha
    return out


def alpha_expansion(D, pairs, potts_weight, init=None, max_cycles=10):
    """Minimise the Potts energy by cycles of expansion moves.

    Returns ``(labels, trace)``; ``trace`` lists the energy after every move
    and is non-increasing (moves that fail to lower the energy are discarded).
    """
    n, L = D.shape
    labels = np.argmin(D, axis=1) if init is None else np.asarray(init).copy()
    energy = labeling_energy(labels, D, pairs, potts_weight)
    trace = [energy]
    for _ in range(max_cycles):
        improved = False
        for alpha in range(L):
            cand = expansion_move(labels, alpha, D, pairs, potts_weight)
            e = labeling_energy(cand, D, pairs, potts_weight)
            if e < energy - 1e-12 * max(1.0, abs(energy)):
                labels, energy = cand, e
                improved = True
            trace.append(energy)
        if not improved:
            break
    return labels, trace


def graphcut_assign(fragment, planes, params: EnergyParams | None = None, min_support=50,
                    max_cycles=10, pairs=None) -> PlaneLabeling:
    """Assign each point a plane or the null label by alpha-expansion.

    Planes that end with fewer than ``min_support`` points are dropped, their
    points become null, and the remaining labels are re-optimised.

    Raises:
        NoPlanes: ``planes`` is empty.
    """
    params = params or EnergyParams()
    planes = list(planes)
    if not planes:
        raise NoPlanes("graph-cut assignment needs at least one plane")
    pts = fragment.points if hasattr(fragment, "points") else np.asarray(fragment, dtype=float)
    if pairs is None:
        pairs = neighbor_pairs(pts, params.neighbor_k, params.neighbor_radius)
    trace = []
    init = None
    while True:
        D = data_costs(pts, planes, params.null_cost)
        labels, tr = alpha_expansion(D, pairs, params.potts_weight, init=init, max_cycles=max_cycles)
        trace.extend(tr)
        L = len(planes)
        counts = np.bincount(labels, minlength=L + 1)[:L]
        weak = np.flatnonzero(counts < min_support)
        if len(weak) == 0:
            break
        keep = np.flatnonzero(counts >= min_support)
        remap = np.full(L + 1, len(keep), dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        init = remap[labels]
        planes = [planes[k] for k in keep]
        if not planes:
            labels = init
            break
    out = np.where(labels == len(planes), NULL, labels)
    return PlaneLabeling(out.astype(np.int64), tuple(planes), tuple(trace))


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------


def _best_hypothesis_per_segment(segments, fragment, normals, offsets, triples):
    """For each segment, the lowest-cost plane among triples containing it.

    Ties go to the earlier hypothesis. Segments in no triple get ``None``.
    """
    best = [None] * len(segments)
    if len(triples) == 0:
        return best
    h = np.repeat(np.arange(len(triples)), 3)
    seg = triples.reshape(-1)
    order = np.argsort(seg, kind="stable")
    h, seg = h[order], seg[order]
    bounds = np.searchsorted(seg, np.arange(len(segments) + 1))
    for s in range(len(segments)):
        hs = h[bounds[s]:bounds[s + 1]]
        if len(hs) == 0:
            continue
        pts = fragment.points[segments[s].point_indices]
        cost = np.abs(pts @ normals[hs].T + offsets[hs]).mean(axis=0)
        k = hs[int(np.argmin(cost))]
        best[s] = Plane(normals[k], offsets[k])
    return best


def _refit(points, labeling: PlaneLabeling, viewpoint):
    planes = []
    for k, pl in enumerate(labeling.planes):
        idx = labeling.inliers(k)
        try:
            new = fit_plane_ls(points[idx], viewpoint=viewpoint)
        except DegenerateInput:
            new = pl
        planes.append(new)
    return planes


def _trimmed_refit(points, labeling: PlaneLabeling, viewpoint, k=3.0):
    """Refit, drop inliers beyond ``k`` robust sigmas (MAD), refit again.

    Returns the planes and the updated labels.
    """
    labels = labeling.labels.copy()
    planes = []
    for j, pl in enumerate(_refit(points, labeling, viewpoint)):
        idx = np.flatnonzero(labels == j)
        r = np.abs(pl.signed_distance(points[idx]))
        scale = 1.4826 * np.median(r) if len(r) else 0.0
        out = r > max(k * scale, 1e-9)
        if np.any(out) and np.count_nonzero(~out) >= 3:
            labels[idx[out]] = NULL
            try:
                pl = fit_plane_ls(points[idx[~out]], viewpoint=viewpoint)
            except DegenerateInput:
                pass
        planes.append(pl)
    return planes, labels


def extract_fragment_planes(fragment, params: PlaneExtractionParams | None = None) -> PlaneLabeling:
    """Planes of one fragment with per-point labels for all its points.

    Works on a voxel-downsampled copy: oversegment, sample hypotheses, cluster
    segments, then assign and refit ``assign_rounds`` times. Labels are carried
    to the full-resolution points by nearest neighbour (kept only within the
    null cost of the plane) and planes are refit on the final inliers.
    """
    params = params or PlaneExtractionParams()
    e = params.energy
    sub_idx = voxel_downsample(fragment.points, params.voxel_size)
    sub = fragment.subset(sub_idx)
    origin = fragment.sensor_origin
    empty = PlaneLabeling(np.full(len(fragment), NULL, dtype=np.int64), ())
    if len(sub) < 3:
        return empty
    segments = oversegment(sub, params.seed_resolution, params.seed_normal_angle)
    if len(segments) < 3:
        return empty
    hn, hd, triples = _hypothesis_arrays(segments, sub)
    best = _best_hypothesis_per_segment(segments, sub, hn, hd, triples)
    usable = [s for s in range(len(segments)) if best[s] is not None]
    if not usable:
        return empty
    hac = hac_cluster([best[s] for s in usable],
                      [sub.points[segments[s].point_indices] for s in usable],
                      params.merge_threshold, return_groups=True)
    candidates = []
    for pl, sup in zip(hac.planes, hac.support):
        if len(sup) >= params.min_support:
            try:
                pl = fit_plane_ls(sup, viewpoint=origin)
            except DegenerateInput:
                pass
            candidates.append(pl)
    if not candidates:
        return empty
    pairs = neighbor_pairs(sub.points, e.neighbor_k, e.neighbor_radius)
    labeling = None
    planes = candidates
    trace = []
    for _ in range(max(1, params.assign_rounds)):
        labeling = graphcut_assign(sub, planes, e, params.min_support, params.max_cycles, pairs=pairs)
        trace.extend(labeling.energy_trace)
        if not labeling.planes:
            return empty
        planes = _refit(sub.points, labeling, origin)

    # carry labels to full resolution: a point whose subsampled neighbourhood
    # holds any plane label takes the closest plane, within the null cost
    tree = SpatialIndex(sub.points)
    k = min(8, len(sub))
    _, nn = tree.knn(fragment.points, k)
    claimed = np.any(labeling.labels[nn.reshape(len(fragment), k)] != NULL, axis=1)
    N = np.array([pl.normal for pl in planes])
    off = np.array([pl.offset for pl in planes])
    dist = np.abs(fragment.points @ N.T + off)
    full = np.argmin(dist, axis=1)
    full[~claimed | (dist[np.arange(len(fragment)), full] > e.null_cost)] = NULL
    result = PlaneLabeling(full, tuple(planes), tuple(trace))
    final, full = _trimmed_refit(fragment.points, result, origin)
    return PlaneLabeling(full, tuple(final), tuple(trace))
