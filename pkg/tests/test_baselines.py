import numpy as np
import pytest

from ghr import autodiff as ad
from ghr.autodiff import Tape
from ghr.baselines import (
    FlatConfig,
    FlatModel,
    deep_forward,
    flat_gr_forward,
    flat_params_from_store,
    init_flat_params,
    make_flat_bundle,
    recurrent_forward,
)
from ghr.data import RGGConfig, generate_instance
from ghr.layers import message_pass, rms_norm
from ghr.seeding import stream
from ghr.training import TrainConfig, discounted_loss, loss_targets, train
from util import permute_graph, random_connected_graph

GINE = dict(backbone="gine")
GATED = dict(backbone="gated_gine")


def bundle_for(g, config):
    return make_flat_bundle(g, config)


def fresh(config, seed=0):
    return init_flat_params(config, np.random.default_rng(seed))


def zero_trainable(params):
    for p in params.store.params():
        if p.trainable:
            p.value.data[:] = 0.0


# ---------------------------------------------------------------- config

def test_config_validation_and_round_trip():
    for bad in (dict(mode="wide"), dict(backbone="gat"), dict(layers=0),
                dict(global_steps=0), dict(gamma=1.5), dict(infer_iterations=0)):
        with pytest.raises(ValueError):
            FlatConfig(**bad)
    cfg = FlatConfig(m=8, mode="recurrent", iterations=20, infer_iterations=30,
                     global_steps=2, **GATED)
    assert FlatConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.iteration_count() == 20
    assert cfg.iteration_count(inference=True) == 30
    assert FlatConfig(mode="deep", layers=7).iteration_count(inference=True) == 7


# ---------------------------------------------------------------- forwards

def test_zero_weights_zero_predictions():
    cfg = FlatConfig(m=6, mode="deep", layers=3, **GINE)
    params = fresh(cfg)
    zero_trainable(params)
    g = random_connected_graph(np.random.default_rng(0), 9)
    pred = deep_forward(Tape(), bundle_for(g, cfg), params)
    assert np.array_equal(pred.data, np.zeros((9, 1)))


def test_recurrent_zero_update_weights_reach_fixed_point():
    # zero everything except the readout: the state never moves, so any
    # iteration count reads out the same constant per node
    cfg = FlatConfig(m=6, mode="recurrent", **GATED)
    params = fresh(cfg, seed=3)
    keep = params.readout.data.copy()
    zero_trainable(params)
    params.readout.data[:] = keep
    g = random_connected_graph(np.random.default_rng(1), 8)
    b = bundle_for(g, cfg)
    one = recurrent_forward(Tape(), b, params, t=1)
    five = recurrent_forward(Tape(), b, params, t=5)
    assert np.array_equal(one.data, five.data)
    assert np.allclose(one.data, one.data[0, 0])  # state rows all equal z


def test_deep_single_layer_matches_hand_composition():
    cfg = FlatConfig(m=5, mode="deep", layers=1, **GINE)
    params = fresh(cfg, seed=7)
    g = random_connected_graph(np.random.default_rng(2), 10)
    b = bundle_for(g, cfg)
    got = deep_forward(Tape(), b, params)

    tape = Tape()
    f = ad.matmul(tape, b.x, params.w_node)
    e = ad.gather_rows(tape, ad.matmul(tape, b.e_edge, params.w_edge), b.edge_rows)
    h = ad.tensor(np.repeat(params.z.data, b.n, axis=0))
    u = ad.add(tape, f, rms_norm(tape, h, params.state_norm))
    h = ad.add(tape, h, message_pass(tape, u, b.src, b.dst, e, params.layers[0]))
    want = ad.matmul(tape, h, params.readout)
    assert np.array_equal(got.data, want.data)


def test_deep_two_layers_compose():
    cfg = FlatConfig(m=5, mode="deep", layers=2, **GATED)
    params = fresh(cfg, seed=11)
    g = random_connected_graph(np.random.default_rng(3), 10)
    b = bundle_for(g, cfg)
    got = deep_forward(Tape(), b, params)

    tape = Tape()
    f = ad.matmul(tape, b.x, params.w_node)
    e = ad.gather_rows(tape, ad.matmul(tape, b.e_edge, params.w_edge), b.edge_rows)
    h = ad.tensor(np.repeat(params.z.data, b.n, axis=0))
    for layer in params.layers:
        u = ad.add(tape, f, rms_norm(tape, h, params.state_norm))
        h = ad.add(tape, h, message_pass(tape, u, b.src, b.dst, e, layer))
    want = ad.matmul(tape, h, params.readout)
    assert np.array_equal(got.data, want.data)


def test_structural_equivalences_are_bit_exact():
    # recurrent(T=1) == deep(N=1) == flat_gr(R=1, T=1) on the same weights
    shared_cfg = FlatConfig(m=6, mode="recurrent", iterations=1, **GATED)
    params = fresh(shared_cfg, seed=13)
    deep_cfg = FlatConfig(m=6, mode="deep", layers=1, **GATED)
    as_deep = flat_params_from_store(params.store, deep_cfg)
    g = random_connected_graph(np.random.default_rng(4), 11)
    b = bundle_for(g, shared_cfg)
    rec = recurrent_forward(Tape(), b, params, t=1)
    dee = deep_forward(Tape(), b, as_deep, n_layers=1)
    gr = flat_gr_forward(Tape(), b, params, r=1, t=1)
    assert np.array_equal(rec.data, dee.data)
    assert len(gr) == 1 and np.array_equal(rec.data, gr[0].data)


def test_flat_gr_trace_matches_hand_unroll():
    cfg = FlatConfig(m=4, mode="recurrent", **GINE)
    params = fresh(cfg, seed=17)
    g = random_connected_graph(np.random.default_rng(5), 9)
    b = bundle_for(g, cfg)
    preds = flat_gr_forward(Tape(), b, params, r=2, t=2)

    tape = Tape()
    f = ad.matmul(tape, b.x, params.w_node)
    e = ad.gather_rows(tape, ad.matmul(tape, b.e_edge, params.w_edge), b.edge_rows)
    h = ad.tensor(np.repeat(params.z.data, b.n, axis=0))
    want = []
    for _ in range(2):
        for _ in range(2):
            u = ad.add(tape, f, rms_norm(tape, h, params.state_norm))
            h = ad.add(tape, h, message_pass(tape, u, b.src, b.dst, e, params.layers[0]))
        want.append(ad.matmul(tape, h, params.readout))
    assert len(preds) == 2
    for got, exp in zip(preds, want):
        assert np.array_equal(got.data, exp.data)


def test_deep_forward_rejects_more_layers_than_present():
    cfg = FlatConfig(m=4, mode="deep", layers=2, **GINE)
    params = fresh(cfg)
    g = random_connected_graph(np.random.default_rng(6), 6)
    with pytest.raises(ValueError):
        deep_forward(Tape(), bundle_for(g, cfg), params, n_layers=3)


def test_flat_gr_requires_t_for_shared_layer():
    cfg = FlatConfig(m=4, mode="recurrent", **GINE)
    params = fresh(cfg)
    g = random_connected_graph(np.random.default_rng(7), 6)
    with pytest.raises(ValueError):
        flat_gr_forward(Tape(), bundle_for(g, cfg), params, r=2)


def test_inference_override_changes_only_iteration_count():
    cfg = FlatConfig(m=6, mode="recurrent", iterations=3, infer_iterations=5, **GATED)
    model = FlatModel.initialize(cfg, np.random.default_rng(19))
    inst = generate_instance(RGGConfig(n_min=10, n_max=14, distance_cap=3),
                             stream(23, "b", 0))
    b = model.prepare(inst)
    trained_depth = model.forward(Tape(), b)[-1]
    infer_depth = model.forward(Tape(), b, inference=True)[-1]
    explicit = recurrent_forward(Tape(), b, model.params, t=5)
    assert np.array_equal(infer_depth.data, explicit.data)
    assert not np.array_equal(trained_depth.data, infer_depth.data)


# ---------------------------------------------------------------- properties

def test_permutation_equivariance_both_modes():
    rng = np.random.default_rng(29)
    for cfg in (FlatConfig(m=6, mode="deep", layers=3, **GINE),
                FlatConfig(m=6, mode="recurrent", iterations=4, **GATED)):
        params = fresh(cfg, seed=31)
        for _ in range(5):
            g = random_connected_graph(rng, 12)
            g2, q = permute_graph(g, rng)
            out = deep_forward(Tape(), bundle_for(g, cfg), params) \
                if cfg.mode == "deep" else \
                recurrent_forward(Tape(), bundle_for(g, cfg), params, 4)
            out2 = deep_forward(Tape(), bundle_for(g2, cfg), params) \
                if cfg.mode == "deep" else \
                recurrent_forward(Tape(), bundle_for(g2, cfg), params, 4)
            assert np.max(np.abs(out2.data[q] - out.data)) <= 1e-9


def test_gradient_check_all_variants():
    inst = generate_instance(RGGConfig(n_min=8, n_max=10, distance_cap=3),
                             stream(37, "g", 0))
    for cfg in (FlatConfig(m=4, mode="deep", layers=2, **GINE),
                FlatConfig(m=4, mode="recurrent", iterations=2, **GATED),
                FlatConfig(m=4, mode="recurrent", iterations=2, global_steps=2, **GINE)):
        model = FlatModel.initialize(cfg, np.random.default_rng(41))
        b = model.prepare(inst)
        target, mask = loss_targets(inst)

        def build(tape):
            preds = model.forward(tape, b)
            return discounted_loss(tape, preds, target, mask, cfg.gamma)

        err = ad.finite_difference_check(build, model.store, max_entries_per_param=3,
                                         rng=np.random.default_rng(0))
        assert err <= 1e-6


def test_train_loop_drives_flat_models():
    cfg = FlatConfig(m=6, mode="deep", layers=2, **GINE)
    model = FlatModel.initialize(cfg, np.random.default_rng(43))
    data_cfg = RGGConfig(n_min=8, n_max=12, distance_cap=3)
    data = [generate_instance(data_cfg, stream(47, "t", i)) for i in range(4)]
    before = {p.name: p.value.data.copy() for p in model.store.params() if p.trainable}
    store, log = train(model, data[:3], data[3:],
                       TrainConfig(learning_rate=1e-3, batch_size=2, epochs=2))
    assert len(log.records) == 2
    assert all(np.isfinite(r.train_loss) and np.isfinite(r.val_mae) for r in log.records)
    assert any(not np.array_equal(p.value.data, before[p.name])
               for p in store.params() if p.trainable)
