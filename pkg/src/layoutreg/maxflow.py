"""Augmenting-path s-t max-flow / min-cut on float capacities (Dinic)."""

from __future__ import annotations

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order, shortest_path


class FlowGraph:
    """Directed graph with terminal links, solved by blocking-flow augmentation.

    Nodes are ``0..n-1``; the source and sink are implicit. Edges may be added
    one at a time or in bulk. After :meth:`maxflow`, :meth:`in_source_side`
    reports the minimum cut.
    """

    def __init__(self, n: int):
        self.n = n
        self._u, self._v, self._c, self._rc = [], [], [], []
        self._tcap_s = np.zeros(n)
        self._tcap_t = np.zeros(n)
        self._source_side = None
        self.flow = 0.0

    def add_edge(self, u: int, v: int, cap: float, rev_cap: float = 0.0):
        self.add_edges([u], [v], [cap], [rev_cap])

    def add_edges(self, us, vs, caps, rev_caps=None):
        caps = np.asarray(caps, dtype=float).reshape(-1)
        rev = np.zeros_like(caps) if rev_caps is None else np.asarray(rev_caps, dtype=float).reshape(-1)
        if np.any(caps < 0) or np.any(rev < 0):
            raise ValueError("capacities must be non-negative")
        self._u.append(np.asarray(us, dtype=np.int64).reshape(-1))
        self._v.append(np.asarray(vs, dtype=np.int64).reshape(-1))
        self._c.append(caps)
        self._rc.append(rev)

    def add_tedge(self, u: int, cap_source: float, cap_sink: float):
        """Add capacity on ``source -> u`` and ``u -> sink``."""
        self.add_tedges([u], [cap_source], [cap_sink])

    def add_tedges(self, us, caps_source, caps_sink):
        cs = np.asarray(caps_source, dtype=float).reshape(-1)
        ct = np.asarray(caps_sink, dtype=float).reshape(-1)
        if np.any(cs < 0) or np.any(ct < 0):
            raise ValueError("capacities must be non-negative")
        us = np.asarray(us, dtype=np.int64).reshape(-1)
        np.add.at(self._tcap_s, us, cs)
        np.add.at(self._tcap_t, us, ct)

    def _build(self):
        """Arc arrays grouped by tail; arc ``k`` and its reverse are paired."""
        n = self.n
        s, t = n, n + 1
        cs, ct = self._tcap_s.copy(), self._tcap_t.copy()
        # paths source -> u -> sink are saturated up front
        m = np.minimum(cs, ct)
        base_flow = float(m.sum())
        cs -= m
        ct -= m
        cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0)  # noqa: E731
        eu = cat(self._u).astype(np.int64)
        ev = cat(self._v).astype(np.int64)
        ec = cat(self._c).copy()
        erc = cat(self._rc).copy()
        base_flow += self._push_short_paths(eu, ev, ec, erc, cs, ct)
        su = np.flatnonzero(cs > 0.0)
        tu = np.flatnonzero(ct > 0.0)
        u = np.concatenate([eu, np.full(len(su), s), tu]).astype(np.int64)
        v = np.concatenate([ev, su, np.full(len(tu), t)]).astype(np.int64)
        c = np.concatenate([ec, cs[su], ct[tu]])
        rc = np.concatenate([erc, np.zeros(len(su)), np.zeros(len(tu))])
        m = len(u)
        tails = np.empty(2 * m, dtype=np.int64)
        heads = np.empty(2 * m, dtype=np.int64)
        caps = np.empty(2 * m)
        tails[0::2], tails[1::2] = u, v
        heads[0::2], heads[1::2] = v, u
        caps[0::2], caps[1::2] = c, rc
        order = np.argsort(tails, kind="stable")
        pos = np.empty(2 * m, dtype=np.int64)
        pos[order] = np.arange(2 * m)
        mate = pos[np.arange(2 * m) ^ 1]
        start = np.searchsorted(tails[order], np.arange(n + 3))
        biggest = float(max(caps.max(initial=0.0), 0.0))
        self._tails = tails[order]
        self._heads = heads[order]
        return (base_flow, heads[order].tolist(), caps[order].tolist(), mate[order].tolist(),
                start.tolist(), biggest)

    def _residual(self, cap, eps):
        c = np.asarray(cap)
        live = c > eps
        N = self.n + 2
        return csr_matrix((np.ones(int(live.sum())), (self._tails[live], self._heads[live])), shape=(N, N))

    @staticmethod
    def _push_short_paths(eu, ev, ec, erc, cs, ct):
        """Saturate paths ``source -> u -> v -> sink`` greedily, in edge order.

        Updates the capacity arrays in place and returns the flow pushed.
        """
        cand = np.flatnonzero(((cs[eu] > 0) & (ct[ev] > 0) & (ec > 0))
                              | ((cs[ev] > 0) & (ct[eu] > 0) & (erc > 0)))
        pushed = 0.0
        for k in cand.tolist():
            a, b = eu[k], ev[k]
            f = min(cs[a], ec[k], ct[b])
            if f > 0.0:
                cs[a] -= f
                ct[b] -= f
                ec[k] -= f
                erc[k] += f
                pushed += f
            f = min(cs[b], erc[k], ct[a])
            if f > 0.0:
                cs[b] -= f
                ct[a] -= f
                erc[k] -= f
                ec[k] += f
                pushed += f
        return pushed

    def maxflow(self) -> float:
        n = self.n
        s, t = n, n + 1
        flow, to, cap, mate, start, biggest = self._build()
        eps = 1e-13 * max(biggest, 1e-300)
        N = n + 2
        while True:
            dist = shortest_path(self._residual(cap, eps), unweighted=True, indices=s)
            if not np.isfinite(dist[t]):
                break
            level = np.where(np.isfinite(dist), dist, -1).astype(np.int64).tolist()
            it = start[:N]
            while True:
                pushed = self._augment(s, t, level, it, to, cap, mate, start, eps)
                if pushed <= 0.0:
                    break
                flow += pushed
        self.flow = flow
        self._source_side = self._reachable(to, cap, start, eps)
        return flow

    @staticmethod
    def _augment(s, t, level, it, to, cap, mate, start, eps):
        """Find one shortest augmenting path with current-arc pointers."""
        path = []
        u = s
        while True:
            if u == t:
                f = min(cap[e] for e in path)
                for e in path:
                    cap[e] -= f
                    cap[mate[e]] += f
                return f
            e = it[u]
            end = start[u + 1]
            while e < end:
                if cap[e] > eps and level[to[e]] == level[u] + 1:
                    break
                e += 1
            it[u] = e
            if e == end:
                if u == s:
                    return 0.0
                level[u] = -1  # dead end
                e_back = path.pop()
                u = to[mate[e_back]]
                it[u] += 1
                continue
            path.append(e)
            u = to[e]

    def _reachable(self, to, cap, start, eps):
        order = breadth_first_order(self._residual(cap, eps), self.n, return_predecessors=False)
        seen = [False] * (self.n + 2)
        for x in order.tolist():
            seen[x] = True
        return seen

    def in_source_side(self, u: int) -> bool:
        if self._source_side is None:
            raise RuntimeError("call maxflow() first")
        return self._source_side[u]

    def source_side(self) -> np.ndarray:
        """Boolean mask over the ``n`` regular nodes."""
        if self._source_side is None:
            raise RuntimeError("call maxflow() first")
        return np.array(self._source_side[: self.n], dtype=bool)
