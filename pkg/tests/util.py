"""Shared helpers for the test suite (not part of the package)."""

import numpy as np

from ghr.graphs import Graph, build_graph
from ghr.hierarchy import ClusterAssignment, Hierarchy, build_hierarchy, quotient_graph


def random_connected_graph(rng, n, extra_edge_prob=0.15, d_n=1, d_e=1):
    """A random spanning tree plus extra edges: always connected."""
    edges = set()
    order = rng.permutation(n)
    for k in range(1, n):
        prev = order[int(rng.integers(0, k))]
        edges.add((min(int(order[k]), int(prev)), max(int(order[k]), int(prev))))
    for i in range(n):
        for j in range(i + 1, n):
            if (i, j) not in edges and rng.random() < extra_edge_prob:
                edges.add((i, j))
    edges = sorted(edges)
    return build_graph(n, edges, rng.standard_normal((n, d_n)),
                       rng.standard_normal((len(edges), d_e)))


def floyd_warshall(n, edges):
    INF = float("inf")
    d = [[0 if i == j else INF for j in range(n)] for i in range(n)]
    for u, v in edges:
        d[u][v] = d[v][u] = 1
    for k in range(n):
        dk = d[k]
        for i in range(n):
            dik = d[i][k]
            if dik == INF:
                continue
            di = d[i]
            for j in range(n):
                if dik + dk[j] < di[j]:
                    di[j] = dik + dk[j]
    return d


def permute_graph(g: Graph, rng) -> tuple[Graph, np.ndarray]:
    """Relabel nodes at random; returns (graph, q) with new_id = q[old_id]."""
    n = g.num_nodes
    q = rng.permutation(n)
    inv = np.empty(n, dtype=np.int64)
    inv[q] = np.arange(n)
    g2 = build_graph(
        n,
        [(int(q[u]), int(q[v])) for u, v in g.edges.tolist()],
        g.node_features[inv],
        g.edge_features,
        positions=g.positions[inv] if g.positions is not None else None,
    )
    return g2, q


def permute_hierarchy(h: Hierarchy, rng) -> tuple[Hierarchy, np.ndarray]:
    """Relabel low nodes (and cluster ids) of a hierarchy at random.

    Returns the permuted hierarchy plus the map q with new_id = q[old_id];
    a model's node outputs should satisfy out_new[q] == out_old.
    """
    g = h.low
    n = g.num_nodes
    q = rng.permutation(n)
    inv = np.empty(n, dtype=np.int64)
    inv[q] = np.arange(n)
    g2 = build_graph(
        n,
        [(int(q[u]), int(q[v])) for u, v in g.edges.tolist()],
        g.node_features[inv],
        g.edge_features,
        positions=g.positions[inv] if g.positions is not None else None,
    )
    n_h = h.assignment.num_clusters
    cq = rng.permutation(n_h)
    a2 = ClusterAssignment(cq[h.assignment.cluster_of[inv]], n_h)
    high2 = quotient_graph(g2, a2, edge_reduce="sum", node_reduce=h.feature_reduce)
    return Hierarchy(low=g2, high=high2, assignment=a2, feature_reduce=h.feature_reduce), q


def small_hierarchy(rng, n=12, iterations=2, feature_reduce="max", d_n=1, d_e=1):
    g = random_connected_graph(rng, n, d_n=d_n, d_e=d_e)
    return build_hierarchy(g, iterations=iterations, feature_reduce=feature_reduce, rng=rng)
