"""Immutable attributed graphs and the exact combinatorics used as labels.

A :class:`Graph` is an undirected simple graph with dense node / edge feature
matrices and an optional 2-D embedding. Construction canonicalizes every edge
to ``(min, max)``, validates the usual invariants, and precomputes both a CSR
neighbor index (for BFS) and the directed-arc expansion used by message
passing: each undirected edge {u, v} yields the two arcs u->v and v->u, both
reading the same edge-feature row.

All functions here are pure; graphs never mutate after construction.
"""

from __future__ import annotations

import collections
import json
from typing import Iterable, Sequence

import numpy as np

from .errors import DuplicateEdge, IndexOutOfRange, SelfLoop, ShapeMismatch


class _Unreachable:
    """Sentinel for 'no path'. Never compares equal to any number."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNREACHABLE"


UNREACHABLE = _Unreachable()

# internal storage code for unreachable entries; never exposed through the API
_NO_PATH = -1


class DistanceVector:
    """Per-node hop counts from a fixed source, with an explicit sentinel.

    Indexing returns either a non-negative ``int`` or :data:`UNREACHABLE`;
    the raw integer buffer is not part of the public contract.
    """

    __slots__ = ("_hops",)

    def __init__(self, hops: np.ndarray):
        self._hops = np.asarray(hops, dtype=np.int64)
        self._hops.setflags(write=False)

    def __len__(self) -> int:
        return self._hops.shape[0]

    def __getitem__(self, i: int):
        v = int(self._hops[i])
        return UNREACHABLE if v == _NO_PATH else v

    def __eq__(self, other) -> bool:
        return isinstance(other, DistanceVector) and np.array_equal(self._hops, other._hops)

    @property
    def reachable(self) -> np.ndarray:
        """Boolean mask of nodes with a finite distance."""
        return self._hops != _NO_PATH

    def finite_hops(self) -> np.ndarray:
        """Hop counts where reachable; meaningless entries elsewhere."""
        return self._hops.copy()

    def max_finite(self):
        """Largest finite distance, or UNREACHABLE if nothing is reachable."""
        m = self.reachable
        if not m.any():
            return UNREACHABLE
        return int(self._hops[m].max())

    def to_list(self) -> list:
        """JSON-friendly form: ints with ``None`` for unreachable nodes."""
        return [None if h == _NO_PATH else int(h) for h in self._hops]

    @staticmethod
    def from_list(values: Sequence) -> "DistanceVector":
        return DistanceVector(np.array([_NO_PATH if v is None else int(v) for v in values], dtype=np.int64))


class Graph:
    """Undirected attributed graph. Use :func:`build_graph` to construct."""

    __slots__ = (
        "num_nodes", "edges", "node_features", "edge_features", "positions",
        "arc_src", "arc_dst", "arc_edge", "_adj_offsets", "_adj_targets",
    )

    def __init__(self, num_nodes, edges, node_features, edge_features, positions,
                 arc_src, arc_dst, arc_edge, adj_offsets, adj_targets):
        self.num_nodes = num_nodes
        self.edges = edges
        self.node_features = node_features
        self.edge_features = edge_features
        self.positions = positions
        self.arc_src = arc_src
        self.arc_dst = arc_dst
        self.arc_edge = arc_edge
        self._adj_offsets = adj_offsets
        self._adj_targets = adj_targets
        for arr in (edges, node_features, edge_features, arc_src, arc_dst, arc_edge, positions):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def num_arcs(self) -> int:
        return self.arc_src.shape[0]

    def neighbors(self, i: int) -> np.ndarray:
        """Sorted neighbor ids of node ``i`` (edge-list-order independent)."""
        if not 0 <= i < self.num_nodes:
            raise IndexOutOfRange(f"node {i} not in [0, {self.num_nodes})")
        return self._adj_targets[self._adj_offsets[i]:self._adj_offsets[i + 1]]

    def degree(self, i: int) -> int:
        return int(self._adj_offsets[i + 1] - self._adj_offsets[i])

    def degrees(self) -> np.ndarray:
        return np.diff(self._adj_offsets)

    def replace_node_features(self, node_features: np.ndarray) -> "Graph":
        """Same topology and edge features, new node feature matrix."""
        x = np.ascontiguousarray(node_features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != self.num_nodes:
            raise ShapeMismatch(f"node_features must be [{self.num_nodes} x d], got {x.shape}")
        return Graph(self.num_nodes, self.edges, x, self.edge_features, self.positions,
                     self.arc_src, self.arc_dst, self.arc_edge, self._adj_offsets, self._adj_targets)


def build_graph(num_nodes: int,
                edges: Iterable,
                node_features: np.ndarray,
                edge_features: np.ndarray,
                positions: np.ndarray | None = None) -> Graph:
    """Validate inputs and build a canonical :class:`Graph`.

    ``edges`` is any sequence of unordered pairs; each pair is stored as
    ``(min, max)``. Duplicate pairs, self-loops, out-of-range endpoints and
    feature-shape mismatches raise the corresponding error.
    """
    if num_nodes < 0:
        raise IndexOutOfRange("num_nodes must be non-negative")
    pairs = []
    for e in edges:
        u, v = sorted(int(x) for x in e)
        pairs.append((u, v))
    edge_arr = np.array(pairs, dtype=np.int64).reshape(len(pairs), 2)

    if len(pairs) > 0:
        if edge_arr.min() < 0 or edge_arr.max() >= num_nodes:
            raise IndexOutOfRange("edge endpoint outside [0, num_nodes)")
        if np.any(edge_arr[:, 0] == edge_arr[:, 1]):
            raise SelfLoop("self-loops are not allowed")
        if len(set(map(tuple, pairs))) != len(pairs):
            raise DuplicateEdge("duplicate undirected edge")

    x = np.ascontiguousarray(node_features, dtype=np.float64)
    ef = np.ascontiguousarray(edge_features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != num_nodes:
        raise ShapeMismatch(f"node_features must be [{num_nodes} x d_n], got {x.shape}")
    if ef.ndim != 2 or ef.shape[0] != len(pairs):
        raise ShapeMismatch(f"edge_features must be [{len(pairs)} x d_e], got {ef.shape}")
    pos = None
    if positions is not None:
        pos = np.ascontiguousarray(positions, dtype=np.float64)
        if pos.shape != (num_nodes, 2):
            raise ShapeMismatch(f"positions must be [{num_nodes} x 2], got {pos.shape}")

    # two directed arcs per edge; arc 2k delivers to edge k's max endpoint,
    # arc 2k+1 to its min endpoint, both reading edge-feature row k
    m = len(pairs)
    arc_src = np.empty(2 * m, dtype=np.int64)
    arc_dst = np.empty(2 * m, dtype=np.int64)
    if m:
        arc_src[0::2] = edge_arr[:, 0]
        arc_dst[0::2] = edge_arr[:, 1]
        arc_src[1::2] = edge_arr[:, 1]
        arc_dst[1::2] = edge_arr[:, 0]
    arc_edge = np.repeat(np.arange(m, dtype=np.int64), 2)

    # CSR neighbor index with sorted targets per node
    counts = np.zeros(num_nodes, dtype=np.int64)
    if m:
        np.add.at(counts, edge_arr[:, 0], 1)
        np.add.at(counts, edge_arr[:, 1], 1)
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    targets = np.empty(2 * m, dtype=np.int64)
    if m:
        order = np.lexsort((arc_src, arc_dst))  # group by dst, neighbors sorted
        targets[:] = arc_src[order]

    return Graph(num_nodes, edge_arr, x, ef, pos, arc_src, arc_dst, arc_edge, offsets, targets)


def bfs_distances(g: Graph, source: int) -> DistanceVector:
    """Exact unweighted hop counts from ``source``; sentinel when disconnected."""
    if not 0 <= source < g.num_nodes:
        raise IndexOutOfRange(f"source {source} not in [0, {g.num_nodes})")
    hops = np.full(g.num_nodes, _NO_PATH, dtype=np.int64)
    hops[source] = 0
    queue = collections.deque([source])
    off, tgt = g._adj_offsets, g._adj_targets
    while queue:
        u = queue.popleft()
        du = hops[u]
        for v in tgt[off[u]:off[u + 1]]:
            if hops[v] == _NO_PATH:
                hops[v] = du + 1
                queue.append(v)
    return DistanceVector(hops)


def connected_components(g: Graph) -> tuple[np.ndarray, int]:
    """Component label per node (labels ordered by smallest member id)."""
    labels = np.full(g.num_nodes, -1, dtype=np.int64)
    count = 0
    off, tgt = g._adj_offsets, g._adj_targets
    for start in range(g.num_nodes):
        if labels[start] != -1:
            continue
        labels[start] = count
        queue = collections.deque([start])
        while queue:
            u = queue.popleft()
            for v in tgt[off[u]:off[u + 1]]:
                if labels[v] == -1:
                    labels[v] = count
                    queue.append(v)
        count += 1
    return labels, count


def diameter(g: Graph):
    """Max finite shortest-path distance over all pairs.

    Disconnected graphs report the maximum over components; the empty graph
    reports UNREACHABLE.
    """
    if g.num_nodes == 0:
        return UNREACHABLE
    best = 0
    for s in range(g.num_nodes):
        m = bfs_distances(g, s).max_finite()
        if m is not UNREACHABLE and m > best:
            best = m
    return best


def eccentricity(g: Graph, source: int):
    """Max finite distance from ``source`` (its BFS tree depth)."""
    return bfs_distances(g, source).max_finite()


def largest_component(g: Graph) -> tuple[Graph, np.ndarray]:
    """Induced subgraph on the largest component, plus the new->old node map.

    Ties between equal-sized components go to the one containing the
    smallest original node index.
    """
    if g.num_nodes < 1:
        raise IndexOutOfRange("largest_component needs at least one node")
    labels, count = connected_components(g)
    sizes = np.bincount(labels, minlength=count)
    winner = int(np.argmax(sizes))  # argmax keeps the first (smallest-min-id) label on ties
    keep = np.flatnonzero(labels == winner)
    old_to_new = np.full(g.num_nodes, -1, dtype=np.int64)
    old_to_new[keep] = np.arange(keep.shape[0])
    edge_mask = (labels[g.edges[:, 0]] == winner) if g.num_edges else np.zeros(0, dtype=bool)
    sub_edges = old_to_new[g.edges[edge_mask]] if g.num_edges else g.edges[:0]
    sub = build_graph(
        keep.shape[0],
        [tuple(e) for e in sub_edges],
        g.node_features[keep],
        g.edge_features[edge_mask] if g.num_edges else g.edge_features[:0],
        positions=g.positions[keep] if g.positions is not None else None,
    )
    return sub, keep


def graph_to_dict(g: Graph) -> dict:
    """Plain-JSON form; floats serialize via repr and round-trip exactly."""
    d = {
        "num_nodes": g.num_nodes,
        "edges": g.edges.tolist(),
        "node_features": g.node_features.tolist(),
        "edge_features": g.edge_features.tolist(),
    }
    if g.positions is not None:
        d["positions"] = g.positions.tolist()
    return d


def graph_from_dict(d: dict) -> Graph:
    ef = np.asarray(d["edge_features"], dtype=np.float64)
    if len(d["edges"]) == 0:
        ef = ef.reshape(0, ef.shape[1] if ef.ndim == 2 else 1)
    return build_graph(
        int(d["num_nodes"]),
        [tuple(e) for e in d["edges"]],
        np.asarray(d["node_features"], dtype=np.float64),
        ef,
        positions=np.asarray(d["positions"], dtype=np.float64) if "positions" in d else None,
    )


def write_graphs_jsonl(path, graphs: Iterable[Graph]) -> None:
    """One graph per line in the line-delimited JSON interchange format."""
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(json.dumps(graph_to_dict(g)) + "\n")


def read_graphs_jsonl(path) -> list[Graph]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(graph_from_dict(json.loads(line)))
    return out
