"""Named deterministic RNG substreams, all derived from one master seed.

Every random decision in the package (data generation, parameter init,
shuffling, hierarchy matching) draws from ``stream(master, "name", *indices)``
so that components are individually reproducible and independent of each
other's consumption order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFF


def stream(master_seed: int, *parts) -> np.random.Generator:
    """Generator for the substream addressed by (master_seed, *parts)."""
    seq = np.random.SeedSequence(entropy=int(master_seed),
                                 spawn_key=tuple(_key(p) for p in parts))
    return np.random.default_rng(seq)


def graph_fingerprint(num_nodes: int, edges: np.ndarray, extra: int = 0) -> int:
    """Stable content hash of a graph's topology (plus an optional tag).

    Used to seed per-graph randomized coarsening so the same graph always
    gets the same hierarchy, whether met during training or evaluation.
    """
    h = zlib.crc32(np.ascontiguousarray(edges, dtype=np.int64).tobytes())
    h = zlib.crc32(int(num_nodes).to_bytes(8, "little"), h)
    h = zlib.crc32(int(extra).to_bytes(8, "little", signed=True), h)
    return h
