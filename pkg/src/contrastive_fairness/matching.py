"""Nearest-neighbour contrastive examples.

A record's counterpart for group ``t`` is the closest real record with the same
label whose protected group is ``t``. Records are bucketed by (label, group)
and each bucket is searched exactly: a k-d tree at low dimension, a blocked
brute-force scan otherwise. Distance ties go to the lowest source index.
Matching is with replacement.
"""

from __future__ import annotations

import heapq
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .contrastive import ContrastiveExample, ContrastiveSet
from .data import Dataset, Record
from .errors import ContractViolation, UnmatchableStratumError

log = logging.getLogger(__name__)

TREE_MAX_DIMS = 30
LEAF_SIZE = 16


@dataclass(frozen=True)
class Metric:
    """Minkowski distance with optional per-column scaling."""

    p: float = 2.0
    scale: tuple | None = None
    name: str = "euclidean"

    def __post_init__(self):
        if self.p < 1:
            raise ContractViolation("Minkowski order must be >= 1")

    def _scaled(self, a: np.ndarray) -> np.ndarray:
        return a if self.scale is None else a * np.asarray(self.scale)

    def rows(self, P: np.ndarray, q: np.ndarray) -> np.ndarray:
        """Distance from each row of ``P`` to ``q``."""
        diff = np.abs(self._scaled(P - q))
        if self.p == 2:
            return np.sqrt(np.sum(diff * diff, axis=1))
        if self.p == 1:
            return np.sum(diff, axis=1)
        return np.sum(diff ** self.p, axis=1) ** (1.0 / self.p)

    def __call__(self, a, b) -> float:
        return float(self.rows(np.atleast_2d(np.asarray(a, dtype=np.float64)), np.asarray(b, dtype=np.float64))[0])

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "p": self.p,
                           "scale": None if self.scale is None else list(self.scale)})

    @classmethod
    def from_json(cls, text: str) -> Metric:
        d = json.loads(text)
        return cls(float(d["p"]), None if d["scale"] is None else tuple(d["scale"]), d["name"])


EUCLIDEAN = Metric()


# -- exact k-d tree ---------------------------------------------------------------


@dataclass
class _Node:
    lo: int
    hi: int
    dim: int = -1
    cut: float = 0.0
    left: _Node | None = None
    right: _Node | None = None


class KdTree:
    """Exact k-nearest search over the rows of ``points`` (ties by row position)."""

    def __init__(self, points: np.ndarray, metric: Metric = EUCLIDEAN, leaf_size: int = LEAF_SIZE):
        self.points = np.asarray(points, dtype=np.float64)
        self.metric = metric
        self.order = np.arange(len(self.points))
        self.leaf_size = leaf_size
        self.root = self._build(0, len(self.points)) if len(self.points) else None

    def _build(self, lo: int, hi: int) -> _Node:
        node = _Node(lo, hi)
        if hi - lo <= self.leaf_size:
            return node
        idx = self.order[lo:hi]
        pts = self.points[idx]
        spread = pts.max(axis=0) - pts.min(axis=0)
        dim = int(np.argmax(spread))
        if spread[dim] == 0:
            return node
        vals = pts[:, dim]
        mid = (hi - lo) // 2
        part = np.argsort(vals, kind="stable")
        self.order[lo:hi] = idx[part]
        node.dim, node.cut = dim, float(vals[part[mid]])
        node.left = self._build(lo, lo + mid)
        node.right = self._build(lo + mid, hi)
        return node

    def query(self, q: np.ndarray, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """(distances, row positions) of the ``k`` nearest rows, nearest first."""
        q = np.asarray(q, dtype=np.float64)
        k = min(k, len(self.points))
        best: list[tuple[float, int]] = []  # max-heap of (-dist, -row)
        scale = None if self.metric.scale is None else np.abs(np.asarray(self.metric.scale))

        def worse_than_kth(d: float) -> bool:
            # small margin so rounding in the distance formula never prunes a tie
            return len(best) == k and d > -best[0][0] * (1 + 1e-12)

        def visit(node: _Node):
            if node.left is None:
                rows = self.order[node.lo:node.hi]
                dist = self.metric.rows(self.points[rows], q)
                for d, r in zip(dist.tolist(), rows.tolist()):
                    item = (-d, -r)
                    if len(best) < k:
                        heapq.heappush(best, item)
                    elif item > best[0]:
                        heapq.heapreplace(best, item)
                return
            delta = q[node.dim] - node.cut
            near, far = (node.left, node.right) if delta < 0 else (node.right, node.left)
            visit(near)
            gap = abs(delta) * (1.0 if scale is None else scale[node.dim])
            # equality must still be explored: an equidistant row may have a lower index
            if not worse_than_kth(gap):
                visit(far)

        if self.root is not None and k > 0:
            visit(self.root)
        out = sorted((-d, -r) for d, r in best)
        return np.array([d for d, _ in out]), np.array([r for _, r in out], dtype=np.int64)


def brute_force(points: np.ndarray, queries: np.ndarray, k: int, metric: Metric = EUCLIDEAN,
                block: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Exact k nearest rows for every query, ties to the lowest row position.

    For Euclidean distance a fast matrix-product expansion preselects the
    candidates, whose distances are then recomputed directly so ties and
    rounding match the per-row formula.
    """
    points = np.asarray(points, dtype=np.float64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    k = min(k, len(points))
    dists = np.empty((len(queries), k))
    rows = np.empty((len(queries), k), dtype=np.int64)
    fast = metric.p == 2
    if fast:
        P = metric._scaled(points)
        p2 = np.einsum("ij,ij->i", P, P)
    for lo in range(0, len(queries), block):
        Q = queries[lo:lo + block]
        if fast:
            Qs = metric._scaled(Q)
            q2 = np.einsum("ij,ij->i", Qs, Qs)
            approx = q2[:, None] + p2[None, :] - 2.0 * (Qs @ P.T)
            tol = 1e-9 * (q2[:, None] + p2.max() + 1.0)
            kth = np.partition(approx, k - 1, axis=1)[:, k - 1:k]
        for j, q in enumerate(Q):
            cand = np.flatnonzero(approx[j] <= kth[j] + tol[j]) if fast else np.arange(len(points))
            d = metric.rows(points[cand], q)
            pick = np.lexsort((cand, d))[:k]
            dists[lo + j], rows[lo + j] = d[pick], cand[pick]
    return dists, rows


def searcher(points: np.ndarray, metric: Metric = EUCLIDEAN):
    """Return ``f(queries, k) -> (dists, rows)`` using the tree when dimension allows."""
    if points.shape[1] <= TREE_MAX_DIMS and len(points) > LEAF_SIZE:
        tree = KdTree(points, metric)

        def f(queries, k):
            res = [tree.query(q, k) for q in np.atleast_2d(queries)]
            return np.array([r[0] for r in res]), np.array([r[1] for r in res])
        return f
    return lambda queries, k: brute_force(points, queries, k, metric)


# -- index ------------------------------------------------------------------------


@dataclass
class MatchIndex:
    ds: Dataset
    metric: Metric
    buckets: dict  # (y, s) -> source indices, ascending
    _search: dict = field(default_factory=dict, repr=False)

    def bucket_sizes(self) -> dict:
        return {key: len(v) for key, v in self.buckets.items()}

    def search(self, key, queries, k):
        if key not in self._search:
            self._search[key] = searcher(self.ds.X[self.buckets[key]], self.metric)
        d, r = self._search[key](queries, k)
        return d, self.buckets[key][r]


def build_index(ds: Dataset, metric: Metric = EUCLIDEAN, require_all: bool = True) -> MatchIndex:
    """Bucket the records by (label, group). Every stratum must be non-empty unless ``require_all`` is off."""
    buckets = {}
    empty = []
    for yv in (0, 1):
        for sv in range(ds.schema.n_groups):
            members = np.flatnonzero((ds.y == yv) & (ds.s == sv))
            if len(members):
                buckets[(yv, sv)] = members
            else:
                empty.append((yv, sv))
    if empty and require_all:
        raise UnmatchableStratumError(empty)
    return MatchIndex(ds, metric, buckets)


@dataclass(frozen=True)
class Matches:
    examples: list
    distances: list
    truncated: bool = False

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)


def nn_contrastive(index: MatchIndex, record: Record, k: int = 1, target_s: int | None = None) -> Matches:
    """The ``k`` nearest same-label records of each other group (or just ``target_s``)."""
    if k < 1:
        raise ContractViolation("k must be >= 1")
    targets = [target_s] if target_s is not None else [t for t in range(index.ds.schema.n_groups) if t != record.s]
    examples, distances, truncated = [], [], False
    for t in targets:
        if t == record.s:
            raise ContractViolation("target group equals the record's own group")
        key = (record.y, t)
        if key not in index.buckets:
            raise UnmatchableStratumError([key])
        if k > len(index.buckets[key]):
            truncated = True
            log.warning("k=%d exceeds stratum %s of size %d", k, key, len(index.buckets[key]))
        d, src = index.search(key, record.x[None, :], k)
        for dist, j in zip(d[0], src[0]):
            examples.append(ContrastiveExample(record.index, int(t), index.ds.X[j], record.y))
            distances.append(float(dist))
    return Matches(examples, distances, truncated)


def nn_contrastives(index: MatchIndex, queries: Dataset | None = None) -> ContrastiveSet:
    """Nearest counterpart of every query record for every other group.

    ``queries`` defaults to the indexed dataset; the labels of the query
    records select the stratum searched.
    """
    queries = queries or index.ds
    if queries.schema.hash() != index.ds.schema.hash():
        raise ContractViolation("query schema differs from the index")
    n, groups = len(queries), queries.schema.n_groups
    src_all, tgt_all, match_all = [], [], []
    for (yv, t) in sorted(index.buckets):
        q = np.flatnonzero((queries.y == yv) & (queries.s != t))
        if not len(q):
            continue
        _, match = index.search((yv, t), queries.X[q], 1)
        src_all.append(q)
        tgt_all.append(np.full(len(q), t))
        match_all.append(match[:, 0])
    missing = [(yv, t) for yv in (0, 1) for t in range(groups)
               if (yv, t) not in index.buckets and np.any((queries.y == yv) & (queries.s != t))]
    if missing:
        raise UnmatchableStratumError(missing)
    if not src_all:
        return ContrastiveSet.empty(queries.schema)
    src, tgt, match = np.concatenate(src_all), np.concatenate(tgt_all), np.concatenate(match_all)
    order = np.lexsort((tgt, src))
    src, tgt, match = src[order], tgt[order], match[order]
    meta = {"mode": "nn", "metric": index.metric.to_json(), "matched_from": index.ds.fingerprint(),
            "source": queries.fingerprint(), "matched_index": match.tolist()}
    assert len(src) == n * (groups - 1)
    return ContrastiveSet(queries.schema.hash(), src, tgt, index.ds.X[match], queries.y[src], meta)
