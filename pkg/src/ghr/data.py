"""Seeded random-geometric-graph shortest-path instances and dataset splits.

A generator draws points uniformly in the unit square, connects pairs within
radius r = sqrt(avg_degree / (pi * (n - 1))), keeps the largest component,
and picks a source node under one of two policies:

* ``resample_within_cap`` (train/val): uniform sources, redrawn until the
  source's eccentricity fits under the distance cap;
* ``max_eccentricity`` (test): a deepest source, so labels reach as far past
  the training cap as the graph allows, bounded by the test ceiling.

Labels are exact BFS hop counts; the mask excludes unreachable nodes and
labels above the split's cap. Everything is a pure function of (config, seed).
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import GenerationExhausted
from .graphs import (
    DistanceVector,
    Graph,
    bfs_distances,
    build_graph,
    graph_from_dict,
    graph_to_dict,
    largest_component,
)
from .seeding import stream

_SOURCE_POLICIES = ("resample_within_cap", "max_eccentricity")
_SOURCE_TRIES = 20       # uniform redraws before regenerating the graph
_REGENS_PER_INSTANCE = 200


@dataclass(frozen=True)
class RGGConfig:
    """Generation protocol for one dataset.

    ``distance_cap`` bounds train/val labels; ``test_ceiling`` bounds test
    labels (and rejects deeper graphs under the max-eccentricity policy).
    Test node counts may use their own range (the large protocol does).
    """

    n_min: int = 40
    n_max: int = 60
    avg_degree: float = 12.0
    distance_cap: int | None = 5
    test_ceiling: int | None = 8
    test_n_min: int | None = None
    test_n_max: int | None = None
    split_sizes: tuple[int, int, int] = (6000, 1000, 1000)
    seed: int = 0
    source_policy: str = "resample_within_cap"
    min_stratum_labels: int = 1

    def __post_init__(self):
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError("need 1 <= n_min <= n_max")
        if self.avg_degree < 1:
            raise ValueError("avg_degree must be >= 1")
        if self.source_policy not in _SOURCE_POLICIES:
            raise ValueError(f"source_policy must be one of {_SOURCE_POLICIES}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["split_sizes"] = list(self.split_sizes)
        return d

    @staticmethod
    def from_dict(d: dict) -> "RGGConfig":
        d = dict(d)
        if "split_sizes" in d:
            d["split_sizes"] = tuple(d["split_sizes"])
        return RGGConfig(**d)


@dataclass(frozen=True)
class SSSPInstance:
    """One labeled task: a graph, its source, hop labels, and the loss mask."""

    graph: Graph
    source: int
    labels: DistanceVector
    mask: np.ndarray  # bool per node: include in loss/metrics

    def __post_init__(self):
        m = np.ascontiguousarray(self.mask, dtype=bool)
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    def node_features(self) -> np.ndarray:
        """Source indicator column: 1 at the source, 0 elsewhere."""
        x = np.zeros((self.graph.num_nodes, 1))
        x[self.source, 0] = 1.0
        return x

    def target_vector(self) -> np.ndarray:
        """Labels as a float column; masked-out entries are zero-filled."""
        t = np.zeros((self.graph.num_nodes, 1))
        hops = self.labels.finite_hops()
        t[self.mask, 0] = hops[self.mask]
        return t


def sample_rgg(cfg: RGGConfig, rng: np.random.Generator) -> Graph:
    """One random geometric graph, reduced to its largest component."""
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    pos = rng.uniform(0.0, 1.0, size=(n, 2))
    edges = []
    if n > 1:
        r = np.sqrt(cfg.avg_degree / (np.pi * (n - 1)))
        d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2)
        iu, ju = np.triu_indices(n, k=1)
        hit = d2[iu, ju] <= r * r
        edges = list(zip(iu[hit].tolist(), ju[hit].tolist()))
    g = build_graph(n, edges, np.zeros((n, 1)), np.ones((len(edges), 1)), positions=pos)
    g, _ = largest_component(g)
    return g


def _eccentricities(g: Graph) -> np.ndarray:
    return np.array([bfs_distances(g, s).max_finite() for s in range(g.num_nodes)])


def make_instance(g: Graph, rng: np.random.Generator, cfg: RGGConfig) -> SSSPInstance | None:
    """Pick a source under cfg.source_policy and label the graph.

    Returns None when this graph cannot satisfy the policy (caller should
    sample a fresh graph).
    """
    if cfg.source_policy == "resample_within_cap":
        cap = cfg.distance_cap
        source = None
        for _ in range(_SOURCE_TRIES):
            s = int(rng.integers(0, g.num_nodes))
            if cap is None or bfs_distances(g, s).max_finite() <= cap:
                source = s
                break
        if source is None:
            return None
    else:
        cap = cfg.test_ceiling
        ecc = _eccentricities(g)
        if cap is not None and ecc.max() > cap:
            return None
        source = int(np.argmax(ecc))  # deepest source; ties -> smallest id
    labels = bfs_distances(g, source)
    mask = labels.reachable.copy()
    if cap is not None:
        mask &= labels.finite_hops() <= cap
    return SSSPInstance(graph=g, source=source, labels=labels, mask=mask)


def generate_instance(cfg: RGGConfig, rng: np.random.Generator) -> SSSPInstance:
    """Sample graphs until one admits a valid source."""
    for _ in range(_REGENS_PER_INSTANCE):
        inst = make_instance(sample_rgg(cfg, rng), rng, cfg)
        if inst is not None:
            return inst
    raise GenerationExhausted(
        f"no admissible instance after {_REGENS_PER_INSTANCE} graphs "
        f"(policy={cfg.source_policy}, cap={cfg.distance_cap}, ceiling={cfg.test_ceiling})")


def label_histogram(instances) -> dict[int, int]:
    """Count of masked-in nodes per hop distance across instances."""
    hist: dict[int, int] = {}
    for inst in instances:
        hops = inst.labels.finite_hops()
        for d in hops[inst.mask]:
            hist[int(d)] = hist.get(int(d), 0) + 1
    return dict(sorted(hist.items()))


@dataclass
class Splits:
    train: list[SSSPInstance]
    val: list[SSSPInstance]
    test: list[SSSPInstance]
    manifest: dict


def build_splits(cfg: RGGConfig) -> Splits:
    """Generate train/val/test with per-(split, index) RNG substreams.

    The test split appends extra instances (bounded) until every distance in
    (distance_cap, test_ceiling] carries at least ``min_stratum_labels``
    masked-in labels, so stratified out-of-range metrics are measurable.
    """
    train_cfg = replace(cfg, source_policy="resample_within_cap")
    test_cfg = replace(
        cfg,
        source_policy="max_eccentricity",
        n_min=cfg.test_n_min or cfg.n_min,
        n_max=cfg.test_n_max or cfg.n_max,
    )

    def gen(split_name, split_cfg, count):
        return [generate_instance(split_cfg, stream(cfg.seed, "data", split_name, i))
                for i in range(count)]

    n_train, n_val, n_test = cfg.split_sizes
    train = gen("train", train_cfg, n_train)
    val = gen("val", train_cfg, n_val)
    test = gen("test", test_cfg, n_test)

    extras = 0
    if cfg.distance_cap is not None and cfg.test_ceiling is not None:
        want = range(cfg.distance_cap + 1, cfg.test_ceiling + 1)
        budget = 40 * max(n_test, 1)
        hist = label_histogram(test)
        while any(hist.get(d, 0) < cfg.min_stratum_labels for d in want):
            if extras >= budget:
                missing = [d for d in want if hist.get(d, 0) < cfg.min_stratum_labels]
                raise GenerationExhausted(
                    f"test strata {missing} still below {cfg.min_stratum_labels} "
                    f"labels after {extras} extra instances")
            inst = generate_instance(
                test_cfg, stream(cfg.seed, "data", "test", n_test + extras))
            test.append(inst)
            extras += 1
            hist = label_histogram(test)

    manifest = {
        "config": cfg.to_dict(),
        "source_policies": {"train": "resample_within_cap", "val": "resample_within_cap",
                            "test": "max_eccentricity"},
        "test_extra_instances": extras,
        # JSON object keys are strings, so store them that way from the start
        "histograms": {
            "train": {str(k): v for k, v in label_histogram(train).items()},
            "val": {str(k): v for k, v in label_histogram(val).items()},
            "test": {str(k): v for k, v in label_histogram(test).items()},
        },
    }
    return Splits(train=train, val=val, test=test, manifest=manifest)


# --------------------------------------------------------------------------
# serialization: one instance per JSON line; graph keys plus source/labels/mask
# --------------------------------------------------------------------------

def instance_to_dict(inst: SSSPInstance) -> dict:
    d = graph_to_dict(inst.graph)
    d["source"] = inst.source
    d["labels"] = inst.labels.to_list()
    d["mask"] = [int(v) for v in inst.mask]
    return d


def instance_from_dict(d: dict) -> SSSPInstance:
    return SSSPInstance(
        graph=graph_from_dict(d),
        source=int(d["source"]),
        labels=DistanceVector.from_list(d["labels"]),
        mask=np.array(d["mask"], dtype=bool),
    )


def write_instances(path, instances) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_dict(inst)) + "\n")


def read_instances(path) -> list[SSSPInstance]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(instance_from_dict(json.loads(line)))
    return out


def write_dataset(directory, splits: Splits) -> None:
    os.makedirs(directory, exist_ok=True)
    write_instances(os.path.join(directory, "train.jsonl"), splits.train)
    write_instances(os.path.join(directory, "val.jsonl"), splits.val)
    write_instances(os.path.join(directory, "test.jsonl"), splits.test)
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(splits.manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_dataset(directory) -> Splits:
    with open(os.path.join(directory, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    return Splits(
        train=read_instances(os.path.join(directory, "train.jsonl")),
        val=read_instances(os.path.join(directory, "val.jsonl")),
        test=read_instances(os.path.join(directory, "test.jsonl")),
        manifest=manifest,
    )
