"""Coarsening: cluster assignments, quotient graphs, and feature pool/unpool.

Two ways to build a partition of a graph's nodes:

* :func:`graclus_match` — one pass of randomized greedy matching (clusters of
  size 1 or 2). :func:`build_hierarchy` composes several passes into a single
  low->high assignment and rebuilds the coarse graph from the original one, so
  the quotient property holds for the composed map directly.
* :func:`geometric_block_assignment` — partition an L x L lattice into b x b
  blocks; coarse edges carry distances between block centers.

The quotient construction guarantees that coarse hop distances never exceed
fine hop distances, which is what makes the coarse level useful as a shortcut
for long-range message passing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidAssignment, NonDivisibleBlock, ShapeMismatch
from .graphs import Graph, build_graph

_REDUCES = ("sum", "mean", "max")


@dataclass(frozen=True)
class ClusterAssignment:
    """Partition of low-level nodes: ``cluster_of[u]`` in [0, num_clusters)."""

    cluster_of: np.ndarray
    num_clusters: int

    def __post_init__(self):
        c = np.ascontiguousarray(self.cluster_of, dtype=np.int64)
        c.setflags(write=False)
        object.__setattr__(self, "cluster_of", c)
        if self.num_clusters < 0:
            raise InvalidAssignment("num_clusters must be non-negative")
        if c.shape[0] > 0:
            if c.min() < 0 or c.max() >= self.num_clusters:
                raise InvalidAssignment("cluster id outside [0, num_clusters)")
            if np.unique(c).shape[0] != self.num_clusters:
                raise InvalidAssignment("cluster ids must cover the whole range")
        elif self.num_clusters != 0:
            raise InvalidAssignment("no nodes but num_clusters > 0")

    @property
    def num_nodes(self) -> int:
        return self.cluster_of.shape[0]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.cluster_of, minlength=self.num_clusters)


def identity_assignment(n: int) -> ClusterAssignment:
    return ClusterAssignment(np.arange(n, dtype=np.int64), n)


def compose_assignments(first: ClusterAssignment, second: ClusterAssignment) -> ClusterAssignment:
    """low->mid composed with mid->high, giving low->high."""
    if second.num_nodes != first.num_clusters:
        raise InvalidAssignment("second assignment must act on first's clusters")
    return ClusterAssignment(second.cluster_of[first.cluster_of], second.num_clusters)


def graclus_match(g: Graph, rng: np.random.Generator) -> ClusterAssignment:
    """One randomized greedy matching pass; clusters of size 1 or 2.

    Nodes are visited in a seeded random permutation. An unmatched node pairs
    with its unmatched neighbor of minimum degree (ties to the smallest node
    id), or stays a singleton if every neighbor is already taken.
    """
    n = g.num_nodes
    cluster = np.full(n, -1, dtype=np.int64)
    degrees = g.degrees()
    next_id = 0
    for u in rng.permutation(n):
        u = int(u)
        if cluster[u] != -1:
            continue
        best = -1
        best_deg = None
        for v in g.neighbors(u):
            v = int(v)
            if cluster[v] == -1:
                dv = degrees[v]
                if best == -1 or dv < best_deg or (dv == best_deg and v < best):
                    best, best_deg = v, dv
        cluster[u] = next_id
        if best != -1:
            cluster[best] = next_id
        next_id += 1
    return ClusterAssignment(cluster, next_id)


def pool_features(X: np.ndarray, a: ClusterAssignment, reduce: str = "sum") -> np.ndarray:
    """Aggregate member rows per cluster: [n_low x d] -> [num_clusters x d]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != a.num_nodes:
        raise ShapeMismatch(f"expected [{a.num_nodes} x d] features, got {X.shape}")
    if reduce not in _REDUCES:
        raise ValueError(f"reduce must be one of {_REDUCES}")
    d = X.shape[1]
    if reduce == "max":
        out = np.full((a.num_clusters, d), -np.inf)
        np.maximum.at(out, a.cluster_of, X)
        return out
    out = np.zeros((a.num_clusters, d))
    np.add.at(out, a.cluster_of, X)
    if reduce == "mean":
        out /= a.sizes()[:, None]
    return out


def unpool_features(cluster_rows: np.ndarray, a: ClusterAssignment) -> np.ndarray:
    """Broadcast each cluster row back to its members: inverse shape of pool."""
    cluster_rows = np.asarray(cluster_rows, dtype=np.float64)
    if cluster_rows.ndim != 2 or cluster_rows.shape[0] != a.num_clusters:
        raise ShapeMismatch(
            f"expected [{a.num_clusters} x d] features, got {cluster_rows.shape}")
    return cluster_rows[a.cluster_of]


def quotient_graph(g: Graph, a: ClusterAssignment, edge_reduce: str = "sum",
                   node_reduce: str = "mean") -> Graph:
    """Coarse graph: one node per cluster, one edge per distinct cross-cluster
    image of a low edge (self-loops dropped), features reduced over preimages.
    """
    if a.num_nodes != g.num_nodes:
        raise InvalidAssignment(f"assignment covers {a.num_nodes} nodes, graph has {g.num_nodes}")
    if edge_reduce not in _REDUCES:
        raise ValueError(f"edge_reduce must be one of {_REDUCES}")

    ca, cb = a.cluster_of[g.edges[:, 0]], a.cluster_of[g.edges[:, 1]]
    cross = ca != cb
    lo = np.minimum(ca[cross], cb[cross])
    hi = np.maximum(ca[cross], cb[cross])
    feats = g.edge_features[cross]
    d_e = g.edge_features.shape[1]

    if lo.shape[0]:
        keys = lo * a.num_clusters + hi
        uniq, inv = np.unique(keys, return_inverse=True)
        high_edges = np.stack([uniq // a.num_clusters, uniq % a.num_clusters], axis=1)
        if edge_reduce == "max":
            ef = np.full((uniq.shape[0], d_e), -np.inf)
            np.maximum.at(ef, inv, feats)
        else:
            ef = np.zeros((uniq.shape[0], d_e))
            np.add.at(ef, inv, feats)
            if edge_reduce == "mean":
                ef /= np.bincount(inv)[:, None]
    else:
        high_edges = np.zeros((0, 2), dtype=np.int64)
        ef = np.zeros((0, d_e))

    pos = None
    if g.positions is not None:
        pos = pool_features(g.positions, a, "mean")
    return build_graph(a.num_clusters, [tuple(e) for e in high_edges],
                       pool_features(g.node_features, a, node_reduce), ef, positions=pos)


@dataclass(frozen=True)
class Hierarchy:
    """A graph, its coarse quotient, and the composed low->high assignment."""

    low: Graph
    high: Graph
    assignment: ClusterAssignment
    feature_reduce: str

    @property
    def ratio(self) -> float:
        """Coarsening ratio n_low / n_high."""
        return self.low.num_nodes / max(self.high.num_nodes, 1)


def build_hierarchy(g: Graph, iterations: int, feature_reduce: str = "max",
                    edge_reduce: str = "sum", rng: np.random.Generator | None = None,
                    seed: int | None = None) -> Hierarchy:
    """Compose ``iterations`` matching passes into one hierarchy.

    Intermediate quotients only steer the next matching pass; the returned
    high graph is rebuilt from the original graph under the composed
    assignment, so its edge features are exact reduces over all preimages.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0 if seed is None else seed)
    composed = identity_assignment(g.num_nodes)
    current = g
    for _ in range(iterations):
        step = graclus_match(current, rng)
        composed = compose_assignments(composed, step)
        current = quotient_graph(current, step, edge_reduce, node_reduce="mean")
    high = quotient_graph(g, composed, edge_reduce, node_reduce=feature_reduce)
    return Hierarchy(low=g, high=high, assignment=composed, feature_reduce=feature_reduce)


def geometric_block_assignment(L: int, b: int) -> tuple[ClusterAssignment, np.ndarray]:
    """Partition the L x L lattice into b x b blocks.

    Lattice node (x, y) has id ``x * L + y`` and maps to block
    (x // b, y // b), linearized row-major. Returns the assignment together
    with the [num_blocks x 2] block centers at unit lattice spacing; an edge
    between adjacent blocks should carry the distance between their centers
    (see :func:`geometric_block_hierarchy`).
    """
    if b < 1 or L < 1 or L % b != 0:
        raise NonDivisibleBlock(f"block size {b} must divide side length {L}")
    k = L // b
    ids = np.arange(L * L, dtype=np.int64)
    x, y = ids // L, ids % L
    cluster = (x // b) * k + (y // b)
    bx, by = np.arange(k).repeat(k), np.tile(np.arange(k), k)
    centers = np.stack([bx * b + (b - 1) / 2.0, by * b + (b - 1) / 2.0], axis=1)
    return ClusterAssignment(cluster, k * k), centers


def geometric_block_hierarchy(g: Graph, L: int, b: int, feature_reduce: str = "sum") -> Hierarchy:
    """Block-pooled hierarchy of an L x L lattice graph.

    High-level edge features are the Euclidean distances between the centers
    of the two blocks, replacing the quotient's reduced features.
    """
    if g.num_nodes != L * L:
        raise ShapeMismatch(f"expected {L * L} lattice nodes, got {g.num_nodes}")
    a, centers = geometric_block_assignment(L, b)
    q = quotient_graph(g, a, edge_reduce="sum", node_reduce=feature_reduce)
    diffs = centers[q.edges[:, 0]] - centers[q.edges[:, 1]]
    dist = np.sqrt((diffs ** 2).sum(axis=1, keepdims=True))
    high = build_graph(q.num_nodes, [tuple(e) for e in q.edges], q.node_features, dist,
                       positions=centers)
    return Hierarchy(low=g, high=high, assignment=a, feature_reduce=feature_reduce)
