import json

import numpy as np
import pytest

from ghr.data import (
    RGGConfig,
    SSSPInstance,
    build_splits,
    generate_instance,
    instance_from_dict,
    instance_to_dict,
    label_histogram,
    make_instance,
    read_dataset,
    sample_rgg,
    write_dataset,
)
from ghr.errors import GenerationExhausted
from ghr.graphs import UNREACHABLE, build_graph
from ghr.seeding import stream
from util import floyd_warshall


def path_graph(n):
    return build_graph(n, [(i, i + 1) for i in range(n - 1)],
                       np.zeros((n, 1)), np.ones((n - 1, 1)))


# ---------------------------------------------------------------- generator

def test_single_node_config():
    cfg = RGGConfig(n_min=1, n_max=1)
    g = sample_rgg(cfg, np.random.default_rng(0))
    assert g.num_nodes == 1 and g.num_edges == 0


def test_same_seed_same_graph():
    cfg = RGGConfig(n_min=40, n_max=60)
    a = sample_rgg(cfg, np.random.default_rng(7))
    b = sample_rgg(cfg, np.random.default_rng(7))
    assert a.num_nodes == b.num_nodes
    assert np.array_equal(a.edges, b.edges)
    assert np.array_equal(a.positions, b.positions)


def test_mean_degree_band_at_n300():
    cfg = RGGConfig(n_min=300, n_max=300)
    degrees = []
    for i in range(200):
        g = sample_rgg(cfg, stream(11, "deg", i))
        degrees.append(2 * g.num_edges / g.num_nodes)
    assert 9.0 <= np.mean(degrees) <= 15.0


def test_edges_match_radius_rule():
    cfg = RGGConfig(n_min=50, n_max=50)
    rng = np.random.default_rng(3)
    g = sample_rgg(cfg, rng)
    # recompute: the kept component must connect exactly the within-radius pairs
    n = g.num_nodes
    r2 = cfg.avg_degree / (np.pi * 49)  # radius uses the pre-component node count
    got = {tuple(e) for e in g.edges.tolist()}
    for i in range(n):
        for j in range(i + 1, n):
            d2 = ((g.positions[i] - g.positions[j]) ** 2).sum()
            assert ((i, j) in got) == (d2 <= r2)


# ---------------------------------------------------------------- instances

def test_path_graph_max_ecc_source_labels_everything():
    cfg = RGGConfig(n_min=5, n_max=5, source_policy="max_eccentricity",
                    test_ceiling=10, distance_cap=10)
    inst = make_instance(path_graph(5), np.random.default_rng(0), cfg)
    assert inst.source == 0  # both ends have eccentricity 4; smallest id wins
    assert [inst.labels[i] for i in range(5)] == [0, 1, 2, 3, 4]
    assert inst.mask.all()


def test_cap2_on_5path_forces_middle_source():
    cfg = RGGConfig(n_min=5, n_max=5, distance_cap=2)
    inst = make_instance(path_graph(5), np.random.default_rng(12), cfg)
    assert inst is not None and inst.source == 2


def test_mask_invariant_and_fw_oracle():
    cfg = RGGConfig(n_min=30, n_max=60, distance_cap=5)
    for i in range(12):
        inst = generate_instance(cfg, stream(5, "inst", i))
        hops = inst.labels.finite_hops()
        for u in range(inst.graph.num_nodes):
            lab = inst.labels[u]
            expect_in = lab is not UNREACHABLE and lab <= 5
            assert bool(inst.mask[u]) == expect_in
        oracle = floyd_warshall(inst.graph.num_nodes, inst.graph.edges.tolist())
        for u in range(inst.graph.num_nodes):
            assert oracle[inst.source][u] == hops[u]  # connected: all finite


def test_source_indicator_and_targets():
    cfg = RGGConfig(n_min=10, n_max=15, distance_cap=4)
    inst = generate_instance(cfg, stream(6, "inst", 0))
    x = inst.node_features()
    assert x.sum() == 1.0 and x[inst.source, 0] == 1.0
    t = inst.target_vector()
    hops = inst.labels.finite_hops()
    assert (t[inst.mask, 0] == hops[inst.mask]).all()
    assert (t[~inst.mask, 0] == 0).all()


def test_generation_exhausted_when_cap_impossible():
    cfg = RGGConfig(n_min=2, n_max=2, distance_cap=0)
    with pytest.raises(GenerationExhausted):
        generate_instance(cfg, np.random.default_rng(0))


# ---------------------------------------------------------------- splits

def test_build_splits_shapes_and_caps():
    cfg = RGGConfig(n_min=40, n_max=60, distance_cap=5, test_ceiling=8,
                    split_sizes=(6, 3, 3), seed=99, min_stratum_labels=1)
    splits = build_splits(cfg)
    assert len(splits.train) == 6 and len(splits.val) == 3
    assert len(splits.test) == 3 + splits.manifest["test_extra_instances"]
    for inst in splits.train + splits.val:
        assert inst.labels.finite_hops()[inst.mask].max(initial=0) <= 5
    test_hist = label_histogram(splits.test)
    assert max(test_hist) <= 8
    # out-of-range strata are populated (that is what the extras are for)
    for d in (6, 7, 8):
        assert test_hist.get(d, 0) >= 1
    assert splits.manifest["histograms"]["test"] == {str(k): v for k, v in test_hist.items()}
    assert splits.manifest["config"]["seed"] == 99


def test_build_splits_deterministic():
    cfg = RGGConfig(split_sizes=(3, 2, 2), seed=5, min_stratum_labels=1)
    a = build_splits(cfg)
    b = build_splits(cfg)
    for x, y in zip(a.train + a.val + a.test, b.train + b.val + b.test):
        assert instance_to_dict(x) == instance_to_dict(y)


# ---------------------------------------------------------------- round trips

def test_instance_dict_round_trip():
    cfg = RGGConfig(n_min=20, n_max=30, distance_cap=4)
    inst = generate_instance(cfg, stream(8, "rt", 0))
    back = instance_from_dict(json.loads(json.dumps(instance_to_dict(inst))))
    assert back.source == inst.source
    assert np.array_equal(back.graph.edges, inst.graph.edges)
    assert np.array_equal(back.graph.positions, inst.graph.positions)
    assert back.labels == inst.labels
    assert np.array_equal(back.mask, inst.mask)


def test_dataset_directory_round_trip_and_byte_determinism(tmp_path):
    cfg = RGGConfig(split_sizes=(3, 2, 2), seed=31, min_stratum_labels=1)
    splits = build_splits(cfg)
    d1, d2 = tmp_path / "a", tmp_path / "b"
    write_dataset(d1, splits)
    write_dataset(d2, build_splits(cfg))
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"):
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()
    back = read_dataset(d1)
    assert back.manifest == splits.manifest
    assert len(back.train) == len(splits.train)
    assert instance_to_dict(back.test[0]) == instance_to_dict(splits.test[0])
