"""The hierarchical recurrent model: encoding, nested state updates, readouts.

One forward pass keeps two hidden states — per-node rows ``h_low`` on the
input graph and per-cluster rows ``h_high`` on its quotient — and repeats a
global step ``r_steps`` times. Each global step runs ``t_high`` high-level
iterations; every high-level iteration refreshes the coarse state once (from
its own message pass plus the pooled low state) and then unrolls ``t_low``
low-level message-passing iterations that receive the encoded inputs and the
unpooled coarse state.
Predictions are read out node-wise after every global step; training weighs
them with a discounted loss, inference keeps only the last one.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, RowIndex, Tape, Tensor
from .errors import ShapeMismatch
from .graphs import Graph
from .hierarchy import Hierarchy, build_hierarchy
from .seeding import graph_fingerprint
from .layers import (
    GineParams,
    RmsNormParams,
    glorot,
    init_gine,
    init_rms_norm,
    message_pass,
    rms_norm,
)

_BACKBONES = ("gated_gine", "gine")


@dataclass(frozen=True)
class GHRConfig:
    """Shape and schedule of the model; embedded verbatim in checkpoints."""

    m: int = 32
    r_steps: int = 4
    t_high: int = 3
    t_low: int = 6
    gamma: float = 0.8
    backbone: str = "gated_gine"
    time_informed: bool = False
    d_node: int = 1
    d_edge: int = 1
    feature_reduce: str = "max"
    pool_iterations: int = 3
    infer_r_steps: int | None = None
    infer_t_high: int | None = None
    infer_t_low: int | None = None

    def __post_init__(self):
        if self.m < 1 or self.r_steps < 1 or self.t_high < 1 or self.t_low < 1:
            raise ValueError("m, r_steps, t_high, t_low must all be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.backbone not in _BACKBONES:
            raise ValueError(f"backbone must be one of {_BACKBONES}")

    def schedule(self, inference: bool = False) -> tuple[int, int, int]:
        """(r_steps, t_high, t_low) for this pass; inference may override each."""
        if not inference:
            return self.r_steps, self.t_high, self.t_low
        return (
            self.infer_r_steps or self.r_steps,
            self.infer_t_high or self.t_high,
            self.infer_t_low or self.t_low,
        )

    def to_dict(self) -> dict:
        return {
            "m": self.m, "r_steps": self.r_steps, "t_high": self.t_high,
            "t_low": self.t_low, "gamma": self.gamma, "backbone": self.backbone,
            "time_informed": self.time_informed, "d_node": self.d_node,
            "d_edge": self.d_edge, "feature_reduce": self.feature_reduce,
            "pool_iterations": self.pool_iterations,
            "infer_r_steps": self.infer_r_steps, "infer_t_high": self.infer_t_high,
            "infer_t_low": self.infer_t_low,
        }

    @staticmethod
    def from_dict(d: dict) -> "GHRConfig":
        return GHRConfig(**d)

    def with_overrides(self, **kw) -> "GHRConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class GHRParams:
    """All tensors of one model, plus the store that owns them."""

    store: ParamStore
    w_node: Tensor
    w_edge_low: Tensor
    w_edge_high: Tensor
    high_mp: GineParams
    low_mp: GineParams
    w_unpool: Tensor
    state_norm_high: RmsNormParams
    state_norm_low: RmsNormParams
    readout: Tensor
    z_low: Tensor
    z_high: Tensor
    w_time: Tensor | None


def init_ghr_params(config: GHRConfig, rng: np.random.Generator) -> GHRParams:
    """Fresh parameters; creation order is fixed so runs are reproducible."""
    store = ParamStore()
    m = config.m
    w_node = store.add("encode.node", glorot(rng, config.d_node, m))
    w_edge_low = store.add("encode.edge_low", glorot(rng, config.d_edge, m))
    w_edge_high = store.add("encode.edge_high", glorot(rng, config.d_edge, m))
    high_mp = init_gine(store, "high_mp", m, config.backbone, rng)
    low_mp = init_gine(store, "low_mp", m, config.backbone, rng)
    w_unpool = store.add("low.unpool", glorot(rng, m, m))
    state_norm_high = init_rms_norm(store, "state_norm.high", m)
    state_norm_low = init_rms_norm(store, "state_norm.low", m)
    readout = store.add("readout.node", glorot(rng, m, 1))
    z_low = store.add("init.z_low", rng.normal(0.0, 1.0 / np.sqrt(m), size=(1, m)),
                      trainable=False)
    z_high = store.add("init.z_high", rng.normal(0.0, 1.0 / np.sqrt(m), size=(1, m)),
                       trainable=False)
    w_time = store.add("low.time", glorot(rng, 2, m)) if config.time_informed else None
    return GHRParams(store, w_node, w_edge_low, w_edge_high, high_mp, low_mp,
                     w_unpool, state_norm_high, state_norm_low, readout,
                     z_low, z_high, w_time)


def params_from_store(store: ParamStore, config: GHRConfig) -> GHRParams:
    """Re-bind a loaded ParamStore (e.g., from a checkpoint) to the schema."""
    from .layers import MlpParams, SwigluParams

    def t(name):
        return store[name].value

    norm = lambda p: RmsNormParams(t(f"{p}.scale"))
    if config.backbone == "gated_gine":
        update = lambda p: SwigluParams(t(f"{p}.content"), t(f"{p}.gate"), t(f"{p}.out"))
    else:
        update = lambda p: MlpParams(t(f"{p}.first"), t(f"{p}.second"))
    gine = lambda p: GineParams(t(f"{p}.epsilon"), norm(f"{p}.norm"), update(p))
    return GHRParams(
        store, t("encode.node"), t("encode.edge_low"), t("encode.edge_high"),
        gine("high_mp"), gine("low_mp"), t("low.unpool"),
        norm("state_norm.high"), norm("state_norm.low"), t("readout.node"),
        t("init.z_low"), t("init.z_high"),
        t("low.time") if config.time_informed else None,
    )


# --------------------------------------------------------------------------
# instance plumbing: precomputed index structures for one (graph, hierarchy)
# --------------------------------------------------------------------------

class _SumPool:
    def __init__(self, rix: RowIndex):
        self.rix = rix

    def apply(self, tape, x):
        return ad.scatter_add_rows(tape, x, self.rix)


class _MeanPool:
    def __init__(self, rix: RowIndex, inv_sizes: Tensor):
        self.rix = rix
        self.inv = inv_sizes

    def apply(self, tape, x):
        return ad.hadamard(tape, ad.scatter_add_rows(tape, x, self.rix), self.inv)


class _MaxPool:
    """Tournament of pairwise maxima: max(a, b) = a + relu(b - a).

    Column k gathers each cluster's k-th member (clusters shorter than k
    repeat their first member, a no-op under max).
    """

    def __init__(self, columns: list[RowIndex]):
        self.columns = columns

    def apply(self, tape, x):
        out = ad.gather_rows(tape, x, self.columns[0])
        for rix in self.columns[1:]:
            rival = ad.gather_rows(tape, x, rix)
            gap = ad.add(tape, rival, ad.scale_by_constant(tape, out, -1.0))
            out = ad.add(tape, out, ad.relu(tape, gap))
        return out


def _make_pool_plan(assignment, m: int, reduce: str, dtype):
    cluster_of, n_high = assignment.cluster_of, assignment.num_clusters
    if reduce == "sum":
        return _SumPool(RowIndex(cluster_of, n_high))
    if reduce == "mean":
        inv = 1.0 / assignment.sizes().astype(np.float64)
        full = np.repeat(inv[:, None], m, axis=1).astype(dtype)
        return _MeanPool(RowIndex(cluster_of, n_high), ad.tensor(full, dtype=dtype))
    order = np.argsort(cluster_of, kind="stable")
    sizes = assignment.sizes()
    offsets = np.zeros(n_high + 1, dtype=np.int64)
    np.cumsum(sizes, out=offsets[1:])
    columns = []
    for k in range(int(sizes.max())):
        picks = order[offsets[:-1] + np.minimum(k, sizes - 1)]
        columns.append(RowIndex(picks, assignment.num_nodes))
    return _MaxPool(columns)


class GraphBundle:
    """Everything the forward pass needs about one instance, precomputed:
    feature tensors, arc index structures, and the pool/unpool plans."""

    __slots__ = (
        "n_low", "n_high", "x_low", "e_low", "e_high",
        "low_src", "low_dst", "low_edge_rows",
        "high_src", "high_dst", "high_edge_rows",
        "unpool", "pool",
    )

    def __init__(self, n_low, n_high, x_low, e_low, e_high, low_src, low_dst,
                 low_edge_rows, high_src, high_dst, high_edge_rows, unpool, pool):
        self.n_low = n_low
        self.n_high = n_high
        self.x_low = x_low
        self.e_low = e_low
        self.e_high = e_high
        self.low_src = low_src
        self.low_dst = low_dst
        self.low_edge_rows = low_edge_rows
        self.high_src = high_src
        self.high_dst = high_dst
        self.high_edge_rows = high_edge_rows
        self.unpool = unpool
        self.pool = pool


def hierarchy_for(graph: Graph, config: GHRConfig) -> Hierarchy:
    """The canonical hierarchy of a graph, seeded by the graph itself.

    Any process (trainer, evaluator, stats tool) rebuilds bit-identical
    clusterings without sharing state, because the matching RNG is derived
    from the edge list alone.
    """
    rng = np.random.default_rng(graph_fingerprint(graph.num_nodes, graph.edges))
    return build_hierarchy(graph, config.pool_iterations,
                           feature_reduce=config.feature_reduce, rng=rng)


def make_bundle(h: Hierarchy, config: GHRConfig, dtype=np.float64,
                node_features: np.ndarray | None = None) -> GraphBundle:
    """Build the index plumbing for one hierarchy.

    ``node_features`` overrides the low graph's stored features (the data
    pipeline stamps the source indicator this way without copying graphs).
    """
    g, q = h.low, h.high
    x = g.node_features if node_features is None else node_features
    if x.shape != (g.num_nodes, config.d_node):
        raise ShapeMismatch(f"node features {x.shape}, expected {(g.num_nodes, config.d_node)}")
    if g.edge_features.shape[1] != config.d_edge:
        raise ShapeMismatch(f"edge features have width {g.edge_features.shape[1]}, "
                            f"expected {config.d_edge}")
    return GraphBundle(
        n_low=g.num_nodes,
        n_high=q.num_nodes,
        x_low=ad.tensor(x, dtype=dtype),
        e_low=ad.tensor(g.edge_features, dtype=dtype),
        e_high=ad.tensor(q.edge_features, dtype=dtype),
        low_src=RowIndex(g.arc_src, g.num_nodes),
        low_dst=RowIndex(g.arc_dst, g.num_nodes),
        low_edge_rows=RowIndex(g.arc_edge, g.num_edges),
        high_src=RowIndex(q.arc_src, q.num_nodes),
        high_dst=RowIndex(q.arc_dst, q.num_nodes),
        high_edge_rows=RowIndex(q.arc_edge, q.num_edges),
        unpool=RowIndex(h.assignment.cluster_of, q.num_nodes),
        pool=_make_pool_plan(h.assignment, config.m, h.feature_reduce, dtype),
    )


@dataclass
class EncodedInputs:
    """Latent inputs, computed once per forward and injected at every step."""

    f_low: Tensor    # n_low x m
    e_low: Tensor    # per low arc, m
    e_high: Tensor   # per high arc, m


@dataclass
class HiddenState:
    h_low: Tensor
    h_high: Tensor


@dataclass
class ForwardResult:
    predictions: list[Tensor]  # one n_low x 1 tensor per global step
    state: HiddenState
    high_updates: int = 0
    low_updates: int = 0


def encode(tape: Tape, bundle: GraphBundle, params: GHRParams) -> EncodedInputs:
    """Linear, bias-free projections of node and edge features into width m."""
    f_low = ad.matmul(tape, bundle.x_low, params.w_node)
    e_low = ad.gather_rows(tape, ad.matmul(tape, bundle.e_low, params.w_edge_low),
                           bundle.low_edge_rows)
    e_high = ad.gather_rows(tape, ad.matmul(tape, bundle.e_high, params.w_edge_high),
                            bundle.high_edge_rows)
    return EncodedInputs(f_low=f_low, e_low=e_low, e_high=e_high)


def init_state(bundle: GraphBundle, params: GHRParams) -> HiddenState:
    """Both levels start from their fixed seed vector, one copy per row."""
    dt = bundle.x_low.data.dtype
    h_low = ad.tensor(np.repeat(params.z_low.data.astype(dt), bundle.n_low, axis=0), dtype=dt)
    h_high = ad.tensor(np.repeat(params.z_high.data.astype(dt), bundle.n_high, axis=0), dtype=dt)
    return HiddenState(h_low=h_low, h_high=h_high)


def high_update(tape: Tape, g_high: Tensor, g_low: Tensor, enc: EncodedInputs,
                bundle: GraphBundle, params: GHRParams) -> Tensor:
    """g_high + message_pass(norm(g_high) + pool(norm(g_low)), e_high)."""
    pooled = bundle.pool.apply(tape, rms_norm(tape, g_low, params.state_norm_low))
    u = ad.add(tape, rms_norm(tape, g_high, params.state_norm_high), pooled)
    mp = message_pass(tape, u, bundle.high_src, bundle.high_dst, enc.e_high, params.high_mp)
    return ad.add(tape, g_high, mp)


def low_update(tape: Tape, g_high: Tensor, g_low: Tensor, enc: EncodedInputs,
               bundle: GraphBundle, params: GHRParams, t_h: int, t_l: int) -> Tensor:
    """g_low + message_pass(f_low + norm(g_low) + unpool(g_high)·W [+ time row], e_low).

    Only the low state itself is normalized; the unpooled coarse state
    enters raw, so the coarse stream's scale reaches the fine level intact.
    """
    unpooled = ad.matmul(tape, ad.gather_rows(tape, g_high, bundle.unpool), params.w_unpool)
    u = ad.add(tape, ad.add(tape, enc.f_low, rms_norm(tape, g_low, params.state_norm_low)),
               unpooled)
    if params.w_time is not None:
        stamp = ad.tensor(np.array([[float(t_h), float(t_l)]]), dtype=g_low.data.dtype)
        u = ad.add(tape, u, ad.matmul(tape, stamp, params.w_time))
    mp = message_pass(tape, u, bundle.low_src, bundle.low_dst, enc.e_low, params.low_mp)
    return ad.add(tape, g_low, mp)


def global_step(tape: Tape, state: HiddenState, enc: EncodedInputs, bundle: GraphBundle,
                params: GHRParams, t_high: int, t_low: int,
                result: ForwardResult | None = None) -> HiddenState:
    """t_high outer iterations; each refreshes the high state once, then
    runs t_low low-level iterations. Time stamps are 1-based (t_h, t_l)."""
    g_high, g_low = state.h_high, state.h_low
    for t_h in range(1, t_high + 1):
        g_high = high_update(tape, g_high, g_low, enc, bundle, params)
        if result is not None:
            result.high_updates += 1
        for t_l in range(1, t_low + 1):
            g_low = low_update(tape, g_high, g_low, enc, bundle, params, t_h, t_l)
            if result is not None:
                result.low_updates += 1
    return HiddenState(h_low=g_low, h_high=g_high)


def node_readout(tape: Tape, h_low: Tensor, params: GHRParams) -> Tensor:
    """Per-node scalar prediction, shared across all global steps."""
    return ad.matmul(tape, h_low, params.readout)


def edge_readout(tape: Tape, h_low: Tensor, e_edge: Tensor, edges_min: RowIndex,
                 edges_max: RowIndex, weight: Tensor) -> Tensor:
    """Per-edge scalar: (h at min endpoint, h at max endpoint, e) through a
    3m -> 1 linear map; endpoint order fixed by node id for determinism."""
    if weight.shape != (3 * h_low.cols, 1):
        raise ShapeMismatch(f"edge readout weight must be {3 * h_low.cols}x1, got {weight.shape}")
    cat = ad.concat_cols(tape, ad.gather_rows(tape, h_low, edges_min),
                         ad.gather_rows(tape, h_low, edges_max), e_edge)
    return ad.matmul(tape, cat, weight)


def forward(tape: Tape, bundle: GraphBundle, params: GHRParams, config: GHRConfig,
            inference: bool = False) -> ForwardResult:
    """R global steps from the fixed initial state; one readout per step."""
    r_steps, t_high, t_low = config.schedule(inference)
    enc = encode(tape, bundle, params)
    state = init_state(bundle, params)
    result = ForwardResult(predictions=[], state=state)
    for _ in range(r_steps):
        state = global_step(tape, state, enc, bundle, params, t_high, t_low, result)
        result.predictions.append(node_readout(tape, state.h_low, params))
    result.state = state
    return result
