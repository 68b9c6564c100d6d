"""Initial global registration: loop detection and line-process pose graph.

The pose-graph objective is

    sum_odo |f_ij|^2 + sum_loop l_ij |f_ij|^2 + sum_loop Psi(l_ij)

with ``f = se3_log(T_hat^-1 (Ta^-1 Tb))``. Two line-process priors are
available: ``"smooth"`` uses ``Psi(l) = mu (sqrt(l) - 1)^2`` whose minimiser is
``l = (mu / (mu + f))^2``; ``"hard"`` uses ``Psi(l) = mu sqrt(1 - l^2)``, which
is minimised at ``l = 1`` when ``f <= mu`` and ``l = 0`` otherwise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InsufficientCorrespondences, NotConnected, SingularSystem
from .geometry import (
    RigidTransform,
    SpatialIndex,
    adjoint,
    se3_exp,
    se3_log,
    se3_right_jacobian_inv,
)
from .icp import IcpParams, icp_point_to_plane

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Edge:
    i: int
    j: int
    transform: RigidTransform
    information: float = 1.0
    line_weight: float = 1.0


@dataclass(frozen=True, eq=False)
class PoseGraph:
    nodes: tuple
    odometry_edges: tuple
    loop_edges: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "odometry_edges", tuple(self.odometry_edges))
        object.__setattr__(self, "loop_edges", tuple(self.loop_edges))
        for e in self.loop_edges:
            if not 0.0 <= e.line_weight <= 1.0:
                raise ValueError("line weight outside [0, 1]")

    @classmethod
    def from_odometry(cls, odometry, loops=(), nodes=None) -> "PoseGraph":
        if nodes is None:
            nodes = [RigidTransform.identity()]
            for T in odometry:
                nodes.append(nodes[-1] @ T)
        odo = [Edge(i, i + 1, T) for i, T in enumerate(odometry)]
        loop_edges = [Edge(c.i, c.j, c.transform) for c in loops]
        return cls(tuple(nodes), tuple(odo), tuple(loop_edges))


@dataclass(frozen=True, eq=False)
class LoopCandidate:
    i: int
    j: int
    transform: RigidTransform
    overlap: float
    rmse: float = 0.0


@dataclass(frozen=True)
class PoseGraphParams:
    mu: float = 0.05**2
    line_process: str = "smooth"
    max_iterations: int = 100
    tolerance: float = 1e-12
    max_halvings: int = 8
    prune_threshold: float = 0.25


@dataclass(frozen=True)
class LoopDetectionParams:
    overlap_threshold: float = 0.30
    gate_factor: float = 2.0
    icp: IcpParams = field(default_factory=IcpParams)


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------


def pose_residual(Ta: RigidTransform, Tb: RigidTransform, T_ab: RigidTransform) -> np.ndarray:
    """``se3_log(T_ab^-1 (Ta^-1 Tb))``, zero iff ``Ta^-1 Tb == T_ab``."""
    return se3_log(T_ab.inverse() @ (Ta.inverse() @ Tb))


def pose_residual_jacobians(Ta, Tb, T_ab):
    """Residual and its Jacobians w.r.t. left twists applied to ``Ta`` and ``Tb``."""
    r = pose_residual(Ta, Tb, T_ab)
    Jb = se3_right_jacobian_inv(r) @ adjoint(Tb.inverse())
    return r, -Jb, Jb


def line_weight_update(f, mu, mode="smooth"):
    """Minimiser over ``l`` of ``l f + Psi(l)`` for squared residual ``f``."""
    f = np.asarray(f, dtype=float)
    if mode == "smooth":
        return (mu / (mu + f)) ** 2
    if mode == "hard":
        return np.where(f <= mu, 1.0, 0.0)
    raise ValueError(f"unknown line process {mode!r}")


def line_prior(l, mu, mode="smooth"):
    l = np.asarray(l, dtype=float)
    if mode == "smooth":
        return mu * (np.sqrt(l) - 1.0) ** 2
    if mode == "hard":
        return mu * np.sqrt(np.clip(1.0 - l * l, 0.0, None))
    raise ValueError(f"unknown line process {mode!r}")


def edge_residuals(graph: PoseGraph, nodes=None):
    nodes = graph.nodes if nodes is None else nodes
    odo = [pose_residual(nodes[e.i], nodes[e.j], e.transform) for e in graph.odometry_edges]
    loop = [pose_residual(nodes[e.i], nodes[e.j], e.transform) for e in graph.loop_edges]
    return odo, loop


def objective(graph: PoseGraph, params: PoseGraphParams, nodes=None, weights=None) -> float:
    odo, loop = edge_residuals(graph, nodes)
    weights = [e.line_weight for e in graph.loop_edges] if weights is None else weights
    total = sum(e.information * float(r @ r) for e, r in zip(graph.odometry_edges, odo))
    for e, r, l in zip(graph.loop_edges, loop, weights):
        total += l * e.information * float(r @ r) + float(line_prior(l, params.mu, params.line_process))
    return total


def check_connected(graph: PoseGraph):
    n = len(graph.nodes)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for e in graph.odometry_edges:
        parent[find(e.i)] = find(e.j)
    roots = {find(k) for k in range(n)}
    if len(roots) > 1:
        raise NotConnected(f"odometry edges leave {len(roots)} components")


def _compose_tree(graph: PoseGraph):
    """Poses that satisfy every edge of a tree exactly, node 0 kept fixed."""
    adj = {k: [] for k in range(len(graph.nodes))}
    for e in graph.odometry_edges:
        adj[e.i].append((e.j, e.transform))
        adj[e.j].append((e.i, e.transform.inverse()))
    nodes = [None] * len(graph.nodes)
    nodes[0] = graph.nodes[0]
    stack = [0]
    while stack:
        a = stack.pop()
        for b, T in adj[a]:
            if nodes[b] is None:
                nodes[b] = nodes[a] @ T
                stack.append(b)
    return tuple(nodes)


def _gn_pose_step(graph: PoseGraph, nodes, weights, params: PoseGraphParams):
    n = len(nodes)
    dim = 6 * (n - 1)
    H = np.zeros((dim, dim))
    g = np.zeros(dim)
    edges = [(e, e.information) for e in graph.odometry_edges]
    edges += [(e, e.information * w) for e, w in zip(graph.loop_edges, weights)]
    for e, w in edges:
        if w == 0.0:
            continue
        r, Ja, Jb = pose_residual_jacobians(nodes[e.i], nodes[e.j], e.transform)
        blocks = [(e.i, Ja), (e.j, Jb)]
        for a, Ja_ in blocks:
            if a == 0:
                continue
            sa = slice(6 * (a - 1), 6 * a)
            g[sa] += w * Ja_.T @ r
            for b, Jb_ in blocks:
                if b == 0:
                    continue
                sb = slice(6 * (b - 1), 6 * b)
                H[sa, sb] += w * Ja_.T @ Jb_
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        raise SingularSystem("pose-graph normal equations are rank deficient") from None
    if np.min(np.diag(L)) ** 2 < 1e-12 * max(np.max(np.diag(H)), 1e-300):
        raise SingularSystem("pose-graph normal equations are ill-conditioned")
    dx = -np.linalg.solve(H, g)
    return dx


def _apply(nodes, dx, step):
    out = [nodes[0]]
    for k in range(1, len(nodes)):
        out.append(se3_exp(step * dx[6 * (k - 1):6 * k]) @ nodes[k])
    return out


@dataclass(frozen=True, eq=False)
class PoseGraphTrace:
    objective: tuple
    iterations: int


def optimize_pose_graph(graph: PoseGraph, params: PoseGraphParams | None = None,
                        return_trace=False):
    """Alternate damped Gauss-Newton over poses with closed-form line weights.

    Node 0 stays fixed. The objective is non-increasing: the pose step is
    halved until it does not increase the objective, and the line-weight
    update is the exact minimiser with poses held fixed.

    Raises:
        NotConnected: odometry edges do not span all nodes.
        SingularSystem: the normal equations are rank deficient.
    """
    params = params or PoseGraphParams()
    check_connected(graph)
    if not graph.loop_edges and len(graph.odometry_edges) == len(graph.nodes) - 1:
        # a spanning tree is solved exactly by composing along it
        out = PoseGraph(_compose_tree(graph), graph.odometry_edges, ())
        val = objective(out, params)
        return (out, PoseGraphTrace((val,), 0)) if return_trace else out
    nodes = list(graph.nodes)
    weights = np.array([e.line_weight for e in graph.loop_edges], dtype=float)
    history = [objective(graph, params, nodes, weights)]
    it = 0
    for it in range(1, params.max_iterations + 1):
        prev = history[-1]
        if len(nodes) > 1:
            dx = _gn_pose_step(graph, nodes, weights, params)
            step = 1.0
            cur = prev
            for _ in range(params.max_halvings + 1):
                cand = _apply(nodes, dx, step)
                val = objective(graph, params, cand, weights)
                if val <= prev:
                    nodes, cur = cand, val
                    break
                step *= 0.5
        else:
            cur = prev
        if len(graph.loop_edges):
            _, loop = edge_residuals(graph, nodes)
            f = np.array([e.information * float(r @ r) for e, r in zip(graph.loop_edges, loop)])
            weights = line_weight_update(f, params.mu, params.line_process)
            cur = objective(graph, params, nodes, weights)
        history.append(cur)
        if prev - cur <= params.tolerance * max(1.0, prev):
            break
    loops = tuple(replace(e, line_weight=float(w)) for e, w in zip(graph.loop_edges, weights))
    out = PoseGraph(tuple(nodes), graph.odometry_edges, loops)
    if return_trace:
        return out, PoseGraphTrace(tuple(history), it)
    return out


def prune_loops(graph: PoseGraph, threshold=0.25) -> PoseGraph:
    """Drop loop edges with ``l < threshold``; survivors are reset to ``l = 1``."""
    kept = tuple(replace(e, line_weight=1.0) for e in graph.loop_edges if e.line_weight >= threshold)
    return PoseGraph(graph.nodes, graph.odometry_edges, kept)


# ---------------------------------------------------------------------------
# loop detection
# ---------------------------------------------------------------------------


def _diameter(points):
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    return float(np.linalg.norm(hi - lo))


def detect_loop_closures(fragments, poses, params: LoopDetectionParams | None = None,
                         indexes=None) -> list:
    """Align every non-consecutive fragment pair passing the coarse gate.

    The gate keeps pairs whose world-frame centroids (under ``poses``) are
    within ``gate_factor`` times the larger fragment diameter. ICP starts from
    the relative pose ``T_i^-1 T_j`` and pairs with overlap at least
    ``overlap_threshold`` become loop candidates.
    """
    params = params or LoopDetectionParams()
    n = len(fragments)
    if len(poses) != n:
        raise ValueError("need one pose per fragment")
    indexes = indexes or [SpatialIndex(f.points) for f in fragments]
    centroids = [poses[k].apply(f.points.mean(axis=0)) for k, f in enumerate(fragments)]
    diam = [_diameter(f.points) for f in fragments]
    out = []
    for i in range(n):
        for j in range(i + 2, n):
            if np.linalg.norm(centroids[i] - centroids[j]) > params.gate_factor * max(diam[i], diam[j]):
                continue
            T0 = poses[i].inverse() @ poses[j]
            try:
                res = icp_point_to_plane(fragments[j], fragments[i], T0, params.icp, target_index=indexes[i])
            except InsufficientCorrespondences:
                continue
            logger.debug("loop candidate (%d, %d): overlap %.3f rmse %.4f", i, j, res.overlap_ratio, res.rmse)
            if res.overlap_ratio >= params.overlap_threshold:
                out.append(LoopCandidate(i, j, res.transform, res.overlap_ratio, res.rmse))
    return out


def write_edge_diagnostics(graph: PoseGraph, path):
    """Write ``i j residual l`` lines for every edge (odometry edges have l = 1)."""
    odo, loop = edge_residuals(graph)
    lines = [f"{e.i} {e.j} {float(np.linalg.norm(r))!r} 1.0" for e, r in zip(graph.odometry_edges, odo)]
    lines += [f"{e.i} {e.j} {float(np.linalg.norm(r))!r} {float(e.line_weight)!r}" for e, r in zip(graph.loop_edges, loop)]
    Path(path).write_text("".join(s + "\n" for s in lines))
