"""Flat baselines: deep stacks, weight-shared recurrences, and +GR variants.

These models keep the hierarchical network's encoders, normalization
placement, initial state, and readout, but run every update on the input
graph alone. A deep model owns one parameter set per layer; a recurrent
model applies a single shared layer repeatedly with the encoded input
features injected at every iteration. The +GR wrapper adds the outer
recurrence: per-step readouts trained against the discounted loss.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, RowIndex, Tape, Tensor
from .data import SSSPInstance
from .errors import ShapeMismatch
from .graphs import Graph
from .layers import (
    GineParams,
    MlpParams,
    RmsNormParams,
    SwigluParams,
    glorot,
    init_gine,
    init_rms_norm,
    message_pass,
    rms_norm,
)

_MODES = ("deep", "recurrent")
_BACKBONES = ("gated_gine", "gine")


@dataclass(frozen=True)
class FlatConfig:
    m: int = 32
    mode: str = "deep"
    backbone: str = "gine"
    layers: int = 10
    iterations: int = 20
    global_steps: int = 1
    infer_iterations: int | None = None
    gamma: float = 0.8
    d_node: int = 1
    d_edge: int = 1

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.backbone not in _BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if min(self.m, self.layers, self.iterations, self.global_steps,
               self.d_node, self.d_edge) < 1:
            raise ValueError("m, layers, iterations, global_steps, d_node, d_edge >= 1")
        if self.infer_iterations is not None and self.infer_iterations < 1:
            raise ValueError("infer_iterations must be >= 1 when set")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")

    def iteration_count(self, inference: bool = False) -> int:
        """Shared-layer applications per global step (deep: the layer count)."""
        if self.mode == "deep":
            return self.layers
        if inference and self.infer_iterations is not None:
            return self.infer_iterations
        return self.iterations

    def to_dict(self) -> dict:
        return {
            "m": self.m, "mode": self.mode, "backbone": self.backbone,
            "layers": self.layers, "iterations": self.iterations,
            "global_steps": self.global_steps,
            "infer_iterations": self.infer_iterations, "gamma": self.gamma,
            "d_node": self.d_node, "d_edge": self.d_edge,
        }

    @staticmethod
    def from_dict(d: dict) -> "FlatConfig":
        return FlatConfig(**d)

    def with_overrides(self, **kw) -> "FlatConfig":
        return replace(self, **kw)


@dataclass
class FlatModelParams:
    store: ParamStore
    w_node: Tensor
    w_edge: Tensor
    layers: list
    state_norm: RmsNormParams
    readout: Tensor
    z: Tensor


def init_flat_params(config: FlatConfig, rng: np.random.Generator) -> FlatModelParams:
    store = ParamStore()
    m = config.m
    w_node = store.add("encode.node", glorot(rng, config.d_node, m))
    w_edge = store.add("encode.edge", glorot(rng, config.d_edge, m))
    count = config.layers if config.mode == "deep" else 1
    layers = [init_gine(store, f"layer{i}", m, config.backbone, rng) for i in range(count)]
    state_norm = init_rms_norm(store, "state_norm", m)
    readout = store.add("readout.node", glorot(rng, m, 1))
    z = store.add("init.z", rng.normal(0.0, 1.0 / np.sqrt(m), size=(1, m)),
                  trainable=False)
    return FlatModelParams(store, w_node, w_edge, layers, state_norm, readout, z)


def flat_params_from_store(store: ParamStore, config: FlatConfig) -> FlatModelParams:
    def t(name):
        return store[name].value

    if config.backbone == "gated_gine":
        update = lambda p: SwigluParams(t(f"{p}.content"), t(f"{p}.gate"), t(f"{p}.out"))
    else:
        update = lambda p: MlpParams(t(f"{p}.first"), t(f"{p}.second"))
    count = config.layers if config.mode == "deep" else 1
    layers = [GineParams(t(f"layer{i}.epsilon"), RmsNormParams(t(f"layer{i}.norm.scale")),
                         update(f"layer{i}")) for i in range(count)]
    return FlatModelParams(store, t("encode.node"), t("encode.edge"), layers,
                           RmsNormParams(t("state_norm.scale")), t("readout.node"),
                           t("init.z"))


# --------------------------------------------------------------------------
# flat instance plumbing
# --------------------------------------------------------------------------

class FlatBundle:
    __slots__ = ("n", "x", "e_edge", "src", "dst", "edge_rows")

    def __init__(self, n, x, e_edge, src, dst, edge_rows):
        self.n = n
        self.x = x
        self.e_edge = e_edge
        self.src = src
        self.dst = dst
        self.edge_rows = edge_rows


def make_flat_bundle(g: Graph, config: FlatConfig, dtype=np.float64,
                     node_features: np.ndarray | None = None) -> FlatBundle:
    x = g.node_features if node_features is None else node_features
    if x.shape != (g.num_nodes, config.d_node):
        raise ShapeMismatch(f"node features {x.shape}, expected {(g.num_nodes, config.d_node)}")
    if g.edge_features.shape[1] != config.d_edge:
        raise ShapeMismatch(f"edge features have width {g.edge_features.shape[1]}, "
                            f"expected {config.d_edge}")
    return FlatBundle(
        n=g.num_nodes,
        x=ad.tensor(x, dtype=dtype),
        e_edge=ad.tensor(g.edge_features, dtype=dtype),
        src=RowIndex(g.arc_src, g.num_nodes),
        dst=RowIndex(g.arc_dst, g.num_nodes),
        edge_rows=RowIndex(g.arc_edge, g.num_edges),
    )


def _encode(tape, bundle, params):
    f = ad.matmul(tape, bundle.x, params.w_node)
    e = ad.gather_rows(tape, ad.matmul(tape, bundle.e_edge, params.w_edge),
                       bundle.edge_rows)
    return f, e


def _init_state(bundle, params):
    dt = bundle.x.data.dtype
    return ad.tensor(np.repeat(params.z.data.astype(dt), bundle.n, axis=0), dtype=dt)


def _iterate(tape, h, f, e_arc, bundle, params, layer):
    """h + message_pass(f + norm(h), e) — the fine-level update minus unpooling."""
    u = ad.add(tape, f, rms_norm(tape, h, params.state_norm))
    return ad.add(tape, h, message_pass(tape, u, bundle.src, bundle.dst, e_arc, layer))


# --------------------------------------------------------------------------
# forwards
# --------------------------------------------------------------------------

def deep_forward(tape: Tape, bundle: FlatBundle, params: FlatModelParams,
                 n_layers: int | None = None) -> Tensor:
    """Encode, apply the distinct layers in order, read out once."""
    n = len(params.layers) if n_layers is None else n_layers
    if n > len(params.layers):
        raise ValueError(f"asked for {n} layers, model has {len(params.layers)}")
    f, e = _encode(tape, bundle, params)
    h = _init_state(bundle, params)
    for layer in params.layers[:n]:
        h = _iterate(tape, h, f, e, bundle, params, layer)
    return ad.matmul(tape, h, params.readout)


def recurrent_forward(tape: Tape, bundle: FlatBundle, params: FlatModelParams,
                      t: int) -> Tensor:
    """Shared layer applied t times, inputs injected each iteration."""
    if t < 1:
        raise ValueError("t must be >= 1")
    layer = params.layers[0]
    f, e = _encode(tape, bundle, params)
    h = _init_state(bundle, params)
    for _ in range(t):
        h = _iterate(tape, h, f, e, bundle, params, layer)
    return ad.matmul(tape, h, params.readout)


def flat_gr_forward(tape: Tape, bundle: FlatBundle, params: FlatModelParams,
                    r: int, t: int | None = None) -> list[Tensor]:
    """r global steps over the layer schedule, reading out after each.

    With a single shared layer the schedule repeats it t times; with distinct
    layers each global step applies the whole stack once.
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    if len(params.layers) == 1:
        if t is None or t < 1:
            raise ValueError("shared-layer global recurrence needs t >= 1")
        schedule = [params.layers[0]] * t
    else:
        schedule = params.layers
    f, e = _encode(tape, bundle, params)
    h = _init_state(bundle, params)
    preds = []
    for _ in range(r):
        for layer in schedule:
            h = _iterate(tape, h, f, e, bundle, params, layer)
        preds.append(ad.matmul(tape, h, params.readout))
    return preds


# --------------------------------------------------------------------------
# train-loop adapter
# --------------------------------------------------------------------------

class FlatModel:
    """Duck-typed like GHRModel so the same train loop drives both."""

    def __init__(self, config: FlatConfig, params: FlatModelParams):
        self.config = config
        self.params = params
        self.store = params.store
        self.dtype = params.readout.data.dtype.type

    @classmethod
    def initialize(cls, config: FlatConfig, rng: np.random.Generator,
                   dtype=np.float64) -> "FlatModel":
        params = init_flat_params(config, rng)
        if dtype is not np.float64:
            return cls(config, flat_params_from_store(params.store.astype(dtype), config))
        return cls(config, params)

    @classmethod
    def from_store(cls, store: ParamStore, config: FlatConfig) -> "FlatModel":
        return cls(config, flat_params_from_store(store, config))

    def prepare(self, instance: SSSPInstance) -> FlatBundle:
        return make_flat_bundle(instance.graph, self.config, dtype=self.dtype,
                                node_features=instance.node_features())

    def forward(self, tape: Tape, prepared: FlatBundle, inference: bool = False):
        cfg = self.config
        if cfg.global_steps > 1:
            t = cfg.iteration_count(inference) if cfg.mode == "recurrent" else None
            return flat_gr_forward(tape, prepared, self.params, cfg.global_steps, t)
        if cfg.mode == "deep":
            return [deep_forward(tape, prepared, self.params)]
        return [recurrent_forward(tape, prepared, self.params, cfg.iteration_count(inference))]
