"""Chamfer distance and Earth Mover's distance between point sets.

Chamfer uses squared Euclidean distances averaged in both directions; EMD is
the mean *unsquared* distance under the best bijection. All arithmetic runs in
float64.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass

import numpy as np

EXACT_EMD_CAP = 1024
LEAF_SIZE = 16


class CardinalityError(ValueError):
    pass


class ExactCapError(ValueError):
    pass


class AuctionBudgetError(RuntimeError):
    def __init__(self, message: str, partial_value: float, assigned: int):
        super().__init__(message)
        self.partial_value = partial_value
        self.assigned = assigned


def _points(P) -> np.ndarray:
    arr = np.asarray(P, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) point array, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("point set is empty")
    return arr


def sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise squared distances by explicit differences (no |a|^2+|b|^2-2ab cancellation)."""
    diff = A[:, None, :] - B[None, :, :]
    return (diff * diff).sum(axis=2)


def nearest_bruteforce(Q: np.ndarray, P: np.ndarray, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Index and squared distance of each query's nearest point in ``P`` (lowest index on ties)."""
    Q = np.asarray(Q, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    idx = np.empty(len(Q), dtype=np.int64)
    d2 = np.empty(len(Q))
    for s in range(0, len(Q), chunk):
        D = sq_dists(Q[s:s + chunk], P)
        i = np.argmin(D, axis=1)
        idx[s:s + chunk] = i
        d2[s:s + chunk] = D[np.arange(len(i)), i]
    return idx, d2


def chamfer(X, R) -> float:
    X, R = _points(X), _points(R)
    _, dx = nearest_bruteforce(X, R)
    _, dr = nearest_bruteforce(R, X)
    return float(dx.mean() + dr.mean())


# ---------------------------------------------------------------- kd-tree

class KdTree:
    """Balanced 3D kd-tree: widest-extent split at the median, leaves of <= 16 points.

    Leaf point indices are kept in ascending order so that distance ties
    resolve to the lowest input index.
    """

    def __init__(self, points, leaf_size: int = LEAF_SIZE):
        self.points = _points(points)
        self.leaf_size = leaf_size
        n = len(self.points)
        # per node: [start, end, axis, left, right]; split value separate
        self._nodes: list[list[int]] = []
        self._split: list[float] = []
        self.order = np.arange(n)
        self._build(0, n)
        nodes = np.array(self._nodes, dtype=np.int64)
        self.start, self.end, self.axis, self.left, self.right = nodes.T
        self.split = np.array(self._split)
        self.leaves = np.flatnonzero(self.left < 0)
        for leaf in self.leaves:
            s, e = self.start[leaf], self.end[leaf]
            self.order[s:e] = np.sort(self.order[s:e])
        pts = self.points[self.order]
        self.lo = np.array([pts[self.start[l]:self.end[l]].min(axis=0) for l in self.leaves])
        self.hi = np.array([pts[self.start[l]:self.end[l]].max(axis=0) for l in self.leaves])

    def _build(self, start: int, end: int) -> int:
        node = len(self._nodes)
        self._nodes.append([start, end, -1, -1, -1])
        self._split.append(0.0)
        if end - start <= self.leaf_size:
            return node
        idx = self.order[start:end]
        pts = self.points[idx]
        axis = int(np.argmax(pts.max(axis=0) - pts.min(axis=0)))
        mid = (end - start) // 2
        part = np.argpartition(pts[:, axis], mid)
        self.order[start:end] = idx[part]
        split = float(self.points[self.order[start + mid], axis])
        left = self._build(start, start + mid)
        right = self._build(start + mid, end)
        self._nodes[node][2:] = [axis, left, right]
        self._split[node] = split
        return node

    def nearest_neighbor(self, q) -> tuple[int, float]:
        """Exact nearest neighbour of one query by depth-first descent with pruning."""
        q = np.asarray(q, dtype=np.float64)
        best_i, best_d = -1, np.inf
        stack = [(0, 0.0)]
        pts, order = self.points, self.order
        while stack:
            node, bound = stack.pop()
            if bound > best_d:
                continue
            if self.left[node] < 0:
                s, e = self.start[node], self.end[node]
                ids = order[s:e]
                diff = pts[ids] - q
                d = (diff * diff).sum(axis=1)
                k = int(np.argmin(d))
                dk = d[k]
                if dk < best_d or (dk == best_d and ids[k] < best_i):
                    best_i, best_d = int(ids[k]), float(dk)
                continue
            a = self.axis[node]
            delta = q[a] - self.split[node]
            near, far = (self.left[node], self.right[node]) if delta < 0 else (self.right[node], self.left[node])
            stack.append((far, delta * delta))
            stack.append((near, 0.0))
        return best_i, best_d

    def query(self, Q) -> tuple[np.ndarray, np.ndarray]:
        """Batched exact nearest neighbours: seed with each query's home leaf, then
        scan leaves whose bounding box could still hold a closer (or tied) point."""
        Q = _points(Q)
        nq = len(Q)
        pts = self.points[self.order]
        # descend all queries to their home leaf
        node = np.zeros(nq, dtype=np.int64)
        active = self.left[node] >= 0
        while active.any():
            a = np.flatnonzero(active)
            nd = node[a]
            go_left = Q[a, self.axis[nd]] < self.split[nd]
            node[a] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.left[node] >= 0
        best_i = np.full(nq, -1, dtype=np.int64)
        best_d = np.full(nq, np.inf)
        leaf_pos = {int(l): j for j, l in enumerate(self.leaves)}
        home = np.array([leaf_pos[int(n)] for n in node])
        for j, leaf in enumerate(self.leaves):
            sel = np.flatnonzero(home == j)
            if len(sel):
                self._scan_leaf(leaf, Q, sel, pts, best_i, best_d)
        for j, leaf in enumerate(self.leaves):
            gap = np.maximum(self.lo[j] - Q, 0) + np.maximum(Q - self.hi[j], 0)
            lb = (gap * gap).sum(axis=1)
            sel = np.flatnonzero((lb <= best_d) & (home != j))
            if len(sel):
                self._scan_leaf(leaf, Q, sel, pts, best_i, best_d)
        return best_i, best_d

    def _scan_leaf(self, leaf, Q, sel, pts, best_i, best_d):
        s, e = self.start[leaf], self.end[leaf]
        diff = Q[sel][:, None, :] - pts[None, s:e, :]
        d = (diff * diff).sum(axis=2)
        k = np.argmin(d, axis=1)
        dk = d[np.arange(len(sel)), k]
        ik = self.order[s + k]
        better = (dk < best_d[sel]) | ((dk == best_d[sel]) & (ik < best_i[sel]))
        upd = sel[better]
        best_d[upd] = dk[better]
        best_i[upd] = ik[better]


def chamfer_accelerated(X, R) -> float:
    X, R = _points(X), _points(R)
    _, dx = KdTree(R).query(X)
    _, dr = KdTree(X).query(R)
    return float(dx.mean() + dr.mean())


# ---------------------------------------------------------------- EMD

def _pair_cost(X, R) -> np.ndarray:
    X, R = _points(X), _points(R)
    if len(X) != len(R):
        raise CardinalityError(f"EMD needs equal cardinalities, got {len(X)} and {len(R)}")
    return np.sqrt(sq_dists(X, R))


def _assignment_mean(cost: np.ndarray, cols: np.ndarray) -> float:
    return float(cost[np.arange(len(cols)), cols].sum() / len(cols))


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect matching on a square matrix; returns column per row.

    Shortest-augmenting-path form with row/column potentials, O(n^3).
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ValueError("cost matrix must be square")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = np.empty(n, dtype=np.int64)
    cols[p[1:] - 1] = np.arange(n)
    return cols


def emd_exact(X, R, cap: int = EXACT_EMD_CAP) -> float:
    cost = _pair_cost(X, R)
    if len(cost) > cap:
        raise ExactCapError(f"{len(cost)} points exceeds the exact-EMD cap of {cap}; use emd_approx")
    return _assignment_mean(cost, hungarian(cost))


def emd_bruteforce(X, R) -> float:
    cost = _pair_cost(X, R)
    n = len(cost)
    if n > 8:
        raise ExactCapError("brute-force EMD is limited to 8 points")
    return min(_assignment_mean(cost, np.array(perm)) for perm in itertools.permutations(range(n)))


@dataclass
class AuctionResult:
    value: float
    eps: float
    rounds: int
    assignment: np.ndarray


def auction(cost: np.ndarray, eps: float | None = None, max_rounds: int = 1_000_000,
            scaling: float = 5.0) -> AuctionResult:
    """Forward auction with epsilon scaling for a square min-cost assignment.

    Phases run at eps0 = max(cost)/4, eps0/scaling, ... down to the first value
    <= ``eps``; the schedule does not depend on ``eps``, only where it stops.
    The reported value is the cheapest assignment seen at the end of any
    phase, so a smaller target never reports a larger value on the same input.
    The final assignment is within n*eps of optimal in total cost.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    cmax = float(cost.max()) if cost.size else 0.0
    if eps is None:
        eps = max(cmax, 1e-12) * 1e-4
    benefit = -cost
    prices = np.zeros(n)
    e = cmax / 4.0 if cmax > 0 else eps
    rounds = 0
    best: tuple[float, np.ndarray] | None = None
    rows = np.arange(n)
    while True:
        owner = np.full(n, -1, dtype=np.int64)  # object -> person
        assigned = np.full(n, -1, dtype=np.int64)  # person -> object
        while True:
            free = np.flatnonzero(assigned < 0)
            if len(free) == 0:
                break
            rounds += 1
            if rounds > max_rounds:
                done = assigned >= 0
                partial = float(cost[rows[done], assigned[done]].mean()) if done.any() else float("nan")
                raise AuctionBudgetError(f"auction did not converge within {max_rounds} rounds", partial, int(done.sum()))
            vals = benefit[free] - prices[None, :]
            if n > 1:
                top2 = np.argpartition(-vals, 1, axis=1)[:, :2]
                a0 = vals[np.arange(len(free)), top2[:, 0]]
                a1 = vals[np.arange(len(free)), top2[:, 1]]
                first_is_best = a0 >= a1
                j_best = np.where(first_is_best, top2[:, 0], top2[:, 1])
                w1 = np.maximum(a0, a1)
                w2 = np.minimum(a0, a1)
            else:
                j_best = np.zeros(len(free), dtype=np.int64)
                w1 = vals[:, 0]
                w2 = w1 - e
            bids = prices[j_best] + (w1 - w2) + e
            # highest bid per object wins; ties go to the lowest person index
            order = np.lexsort((free, -bids, j_best))
            jb = j_best[order]
            first = np.ones(len(order), dtype=bool)
            first[1:] = jb[1:] != jb[:-1]
            win = order[first]
            objs = j_best[win]
            prev = owner[objs]
            assigned[prev[prev >= 0]] = -1
            owner[objs] = free[win]
            assigned[free[win]] = objs
            prices[objs] = bids[win]
        value = _assignment_mean(cost, assigned)
        if best is None or value < best[0]:
            best = (value, assigned.copy())
        if e <= eps:
            break
        e /= scaling
    return AuctionResult(best[0], e, rounds, best[1])


def emd_approx(X, R, iterations: int = 1_000_000, eps: float | None = None,
               return_details: bool = False):
    res = auction(_pair_cost(X, R), eps=eps, max_rounds=iterations)
    return res if return_details else res.value


def emd(X, R, mode: str = "auto", cap: int = EXACT_EMD_CAP) -> tuple[float, str]:
    """EMD with the mode actually used: ``exact`` up to ``cap`` points, else ``approx``."""
    n = len(np.asarray(X))
    if mode == "exact" or (mode == "auto" and n <= cap):
        return emd_exact(X, R, cap=max(cap, n) if mode == "exact" else cap), "exact"
    if mode not in ("auto", "approx"):
        raise ValueError(f"unknown EMD mode {mode!r}")
    return emd_approx(X, R), "approx"


@dataclass
class MetricReport:
    cd: float
    emd: float
    emd_mode: str
    wall_time: float

    def to_json(self) -> str:
        d = asdict(self)
        d["wall_time_s"] = d.pop("wall_time")
        # a skipped metric is NaN in memory and null on disk
        d = {k: (None if isinstance(v, float) and v != v else v) for k, v in d.items()}
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        nan = float("nan")
        return cls(*(nan if d[k] is None else d[k] for k in ("cd", "emd", "emd_mode", "wall_time_s")))
