import numpy as np
import pytest

import ghr.autodiff as ad
from ghr.autodiff import ParamStore, RowIndex, Tape, tensor
from ghr.layers import (
    GineParams,
    MlpParams,
    RmsNormParams,
    SwigluParams,
    gated_gine_step,
    gine_aggregate,
    gine_step,
    init_gine,
    message_pass,
    relu_mlp,
    rms_norm,
    swiglu,
)


def arc_indices(n, edges):
    src, dst = [], []
    for u, v in edges:
        src += [u, v]
        dst += [v, u]
    return RowIndex(src, n), RowIndex(dst, n)


def zero_update_gine(m, backbone):
    store = ParamStore()
    p = init_gine(store, "l", m, backbone, np.random.default_rng(0))
    if backbone == "gated_gine":
        p.update.out.data[:] = 0.0
    else:
        p.update.second.data[:] = 0.0
    return p


# ---------------------------------------------------------------- rms norm

def test_rms_norm_constant_row_gives_unit_entries():
    t = Tape()
    p = RmsNormParams(tensor(np.ones((1, 4))))
    out = rms_norm(t, tensor(np.full((1, 4), -2.5)), p)
    assert np.allclose(out.data, -1.0, atol=1e-8)


def test_rms_norm_zero_row_is_zero():
    t = Tape()
    p = RmsNormParams(tensor(np.ones((1, 3))))
    assert np.array_equal(rms_norm(t, tensor(np.zeros((2, 3))), p).data, np.zeros((2, 3)))


def test_rms_norm_three_four_case():
    t = Tape()
    p = RmsNormParams(tensor(np.ones((1, 2))))
    out = rms_norm(t, tensor([[3.0, 4.0]]), p)
    assert abs(out.data[0, 0] - 0.848528) < 1e-6
    assert abs(out.data[0, 1] - 1.131371) < 1e-6


def test_rms_norm_unit_rms_rows():
    rng = np.random.default_rng(2)
    t = Tape()
    p = RmsNormParams(tensor(np.ones((1, 6))))
    x = rng.standard_normal((5, 6))
    out = rms_norm(t, tensor(x), p).data
    assert np.allclose(np.sqrt((out ** 2).mean(axis=1)), 1.0, atol=1e-6)


# ---------------------------------------------------------------- swiglu / mlp

def test_swiglu_zero_gate_is_zero():
    rng = np.random.default_rng(1)
    p = SwigluParams(tensor(rng.standard_normal((3, 3))), tensor(np.zeros((3, 3))),
                     tensor(rng.standard_normal((3, 3))))
    out = swiglu(Tape(), tensor(rng.standard_normal((4, 3))), p)
    assert np.array_equal(out.data, np.zeros((4, 3)))


def test_swiglu_scalar_hand_value():
    one = tensor([[1.0]])
    p = SwigluParams(one, one, one)
    out = swiglu(Tape(), tensor([[2.0]]), p)
    assert abs(out.data[0, 0] - 3.523188) < 1e-6


def test_swiglu_zero_input_is_zero():
    rng = np.random.default_rng(3)
    p = SwigluParams(*(tensor(rng.standard_normal((3, 3))) for _ in range(3)))
    assert np.array_equal(swiglu(Tape(), tensor(np.zeros((2, 3))), p).data, np.zeros((2, 3)))


def test_relu_mlp_hand_value():
    one = tensor([[1.0]])
    p = MlpParams(one, one)
    assert relu_mlp(Tape(), tensor([[3.0]]), p).data[0, 0] == 3.0
    assert relu_mlp(Tape(), tensor([[-3.0]]), p).data[0, 0] == 0.0


# ---------------------------------------------------------------- aggregation

def test_aggregate_isolated_node():
    t = Tape()
    h = tensor([[2.0, -1.0]])
    src, dst = arc_indices(1, [])
    eps = tensor([[0.5]])
    out = gine_aggregate(t, h, src, dst, tensor(np.zeros((0, 2))), eps)
    assert np.allclose(out.data, 1.5 * h.data)


def test_aggregate_star_negative_neighbors_vanish():
    # center 0 with three neighbors at -1; e = 0, eps = 0
    h = np.array([[4.0], [-1.0], [-1.0], [-1.0]])
    src, dst = arc_indices(4, [(0, 1), (0, 2), (0, 3)])
    t = Tape()
    out = gine_aggregate(t, tensor(h), src, dst, tensor(np.zeros((6, 1))), tensor([[0.0]]))
    # relu kills the -1 messages into the center; leaves get relu(4) = 4
    assert out.data[0, 0] == 4.0
    assert np.allclose(out.data[1:, 0], -1.0 + 4.0)


def test_aggregate_matches_loop_oracle():
    rng = np.random.default_rng(10)
    n = 10
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.3]
    src, dst = arc_indices(n, edges)
    h = rng.standard_normal((n, 4))
    e_arc = rng.standard_normal((2 * len(edges), 4))
    eps = 0.37
    t = Tape()
    got = gine_aggregate(t, tensor(h), src, dst, tensor(e_arc), tensor([[eps]])).data

    expect = (1 + eps) * h.copy()
    for a in range(2 * len(edges)):
        j, i = src.indices[a], dst.indices[a]
        expect[i] += np.maximum(h[j] + e_arc[a], 0.0)
    assert np.allclose(got, expect, atol=1e-12)


# ---------------------------------------------------------------- full steps

@pytest.mark.parametrize("backbone", ["gated_gine", "gine"])
def test_zero_update_weights_fixed_point(backbone):
    rng = np.random.default_rng(4)
    p = zero_update_gine(3, backbone)
    src, dst = arc_indices(5, [(0, 1), (1, 2), (3, 4)])
    h = tensor(rng.standard_normal((5, 3)))
    e = tensor(rng.standard_normal((6, 3)))
    step = gated_gine_step if backbone == "gated_gine" else gine_step
    out = step(Tape(), h, src, dst, e, p)
    assert np.array_equal(out.data, h.data)


def test_single_node_step_composes_norm_and_swiglu():
    rng = np.random.default_rng(6)
    store = ParamStore()
    p = init_gine(store, "l", 3, "gated_gine", rng)
    h = tensor(rng.standard_normal((1, 3)))
    src, dst = arc_indices(1, [])
    t = Tape()
    got = gated_gine_step(t, h, src, dst, tensor(np.zeros((0, 3))), p).data
    # manual composition: h + swiglu(rms_norm(h)) since eps=0 and no neighbors
    t2 = Tape()
    manual = ad.add(t2, h, swiglu(t2, rms_norm(t2, h, p.pre_norm), p.update)).data
    assert np.allclose(got, manual, atol=0)


def test_gine_step_hand_case_m1():
    # weights 1 everywhere, eps=0, rms scale 1: h + relu(relu(aggregate))
    one = tensor([[1.0]])
    p = GineParams(tensor([[0.0]]), RmsNormParams(one), MlpParams(one, one))
    h = np.array([[2.0], [-2.0]])
    src, dst = arc_indices(2, [(0, 1)])
    e = tensor(np.zeros((2, 1)))
    out = gine_step(Tape(), tensor(h), src, dst, e, p).data
    hn = h / np.sqrt(h ** 2 + 1e-8)  # rms of a length-1 row
    agg = hn.copy()
    agg[1] += max(hn[0, 0] + 0.0, 0.0)
    agg[0] += max(hn[1, 0] + 0.0, 0.0)
    expect = h + np.maximum(np.maximum(agg, 0.0), 0.0)
    assert np.allclose(out, expect, atol=1e-12)


@pytest.mark.parametrize("backbone", ["gated_gine", "gine"])
def test_step_permutation_equivariance(backbone):
    rng = np.random.default_rng(15)
    n, m = 12, 4
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.25]
    store = ParamStore()
    p = init_gine(store, "l", m, backbone, rng)
    h = rng.standard_normal((n, m))
    e_arc = rng.standard_normal((2 * len(edges), m))
    src, dst = arc_indices(n, edges)
    step = gated_gine_step if backbone == "gated_gine" else gine_step
    base = step(Tape(), tensor(h), src, dst, tensor(e_arc), p).data

    perm = rng.permutation(n)          # new row k holds old node perm[k]
    new_pos = np.empty(n, dtype=int)
    new_pos[perm] = np.arange(n)
    src_p = RowIndex(new_pos[src.indices], n)
    dst_p = RowIndex(new_pos[dst.indices], n)
    out_p = step(Tape(), tensor(h[perm]), src_p, dst_p, tensor(e_arc), p).data
    assert np.allclose(out_p, base[perm], atol=1e-9)


@pytest.mark.parametrize("backbone", ["gated_gine", "gine"])
def test_layer_gradients_match_finite_differences(backbone):
    rng = np.random.default_rng(23)
    n, m = 7, 3
    edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (0, 6), (2, 5)]
    store = ParamStore()
    p = init_gine(store, "l", m, backbone, rng)
    h = tensor(rng.standard_normal((n, m)))
    e_arc = tensor(rng.standard_normal((2 * len(edges), m)))
    src, dst = arc_indices(n, edges)
    step = gated_gine_step if backbone == "gated_gine" else gine_step

    def build(t):
        out = step(t, h, src, dst, e_arc, p)
        return ad.sum_all(t, ad.hadamard(t, out, out))

    assert ad.finite_difference_check(build, store, step=1e-5) <= 1e-6


def test_message_pass_is_step_minus_residual():
    rng = np.random.default_rng(31)
    store = ParamStore()
    p = init_gine(store, "l", 3, "gated_gine", rng)
    src, dst = arc_indices(4, [(0, 1), (2, 3), (1, 2)])
    h = tensor(rng.standard_normal((4, 3)))
    e = tensor(rng.standard_normal((6, 3)))
    stepped = gated_gine_step(Tape(), h, src, dst, e, p).data
    bare = message_pass(Tape(), h, src, dst, e, p).data
    assert np.allclose(stepped, h.data + bare, atol=0)
