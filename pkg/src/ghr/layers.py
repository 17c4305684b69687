"""Message-passing layer formulas, composed purely from autodiff primitives.

One layer bundles: a pre-aggregation RMS normalization, the edge-aware sum
aggregation ``(1 + eps) * h_i + sum_j relu(h_j + e_ji)``, and an update
network that is either SwiGLU-gated (content * swish(gate), then an output
projection) or a small ReLU perceptron. ``*_step`` variants add the residual;
:func:`message_pass` returns the bare update so callers can place the
residual on a different tensor (the recurrent state updates do).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, RowIndex, Tape, Tensor


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass(frozen=True)
class RmsNormParams:
    weight: Tensor  # 1 x m scale


@dataclass(frozen=True)
class SwigluParams:
    content: Tensor  # m x m
    gate: Tensor     # m x m
    out: Tensor      # m x m


@dataclass(frozen=True)
class MlpParams:
    first: Tensor   # m x m
    second: Tensor  # m x m


@dataclass(frozen=True)
class GineParams:
    epsilon: Tensor            # 1 x 1, starts at 0
    pre_norm: RmsNormParams    # applied to h before aggregation
    update: SwigluParams | MlpParams


def init_rms_norm(store: ParamStore, prefix: str, m: int) -> RmsNormParams:
    return RmsNormParams(store.add(f"{prefix}.scale", np.ones((1, m))))


def init_gine(store: ParamStore, prefix: str, m: int, backbone: str,
              rng: np.random.Generator) -> GineParams:
    eps = store.add(f"{prefix}.epsilon", np.zeros((1, 1)))
    norm = init_rms_norm(store, f"{prefix}.norm", m)
    if backbone == "gated_gine":
        update = SwigluParams(
            content=store.add(f"{prefix}.content", glorot(rng, m, m)),
            gate=store.add(f"{prefix}.gate", glorot(rng, m, m)),
            out=store.add(f"{prefix}.out", glorot(rng, m, m)),
        )
    elif backbone == "gine":
        update = MlpParams(
            first=store.add(f"{prefix}.first", glorot(rng, m, m)),
            second=store.add(f"{prefix}.second", glorot(rng, m, m)),
        )
    else:
        raise ValueError(f"unknown backbone {backbone!r}")
    return GineParams(epsilon=eps, pre_norm=norm, update=update)


def rms_norm(tape: Tape, x: Tensor, p: RmsNormParams) -> Tensor:
    """Row-wise y_i = w_i * x_i / sqrt(mean(x^2) + 1e-8)."""
    return ad.rms_norm(tape, x, p.weight)


def swiglu(tape: Tape, x: Tensor, p: SwigluParams) -> Tensor:
    """content(x) * swish(gate(x)), then the output projection; no biases."""
    gated = ad.hadamard(tape, ad.matmul(tape, x, p.content),
                        ad.swish(tape, ad.matmul(tape, x, p.gate)))
    return ad.matmul(tape, gated, p.out)


def relu_mlp(tape: Tape, x: Tensor, p: MlpParams) -> Tensor:
    """relu(relu(x W1) W2) — the plain two-layer update, no biases."""
    return ad.relu(tape, ad.matmul(tape, ad.relu(tape, ad.matmul(tape, x, p.first)), p.second))


def apply_update(tape: Tape, x: Tensor, update) -> Tensor:
    if isinstance(update, SwigluParams):
        return swiglu(tape, x, update)
    return relu_mlp(tape, x, update)


def gine_aggregate(tape: Tape, h: Tensor, src: RowIndex, dst: RowIndex,
                   e_arc: Tensor, epsilon: Tensor) -> Tensor:
    """(1 + eps) h_i + sum over incoming arcs of relu(h_j + e_ji).

    ``src``/``dst`` index the arc endpoints into h's rows; ``e_arc`` holds one
    latent edge-feature row per arc. Isolated nodes keep (1 + eps) h_i.
    """
    dt = h.data.dtype
    ones_col = ad.tensor(np.ones((h.rows, 1)), dtype=dt)
    ones_row = ad.tensor(np.ones((1, h.cols)), dtype=dt)
    eps_full = ad.matmul(tape, ones_col, ad.matmul(tape, epsilon, ones_row))
    central = ad.add(tape, h, ad.hadamard(tape, eps_full, h))
    messages = ad.relu(tape, ad.add(tape, ad.gather_rows(tape, h, src), e_arc))
    return ad.add(tape, central, ad.scatter_add_rows(tape, messages, dst))


def message_pass(tape: Tape, h: Tensor, src: RowIndex, dst: RowIndex,
                 e_arc: Tensor, p: GineParams) -> Tensor:
    """Normalize, aggregate, update — without the residual."""
    normed = rms_norm(tape, h, p.pre_norm)
    return apply_update(tape, gine_aggregate(tape, normed, src, dst, e_arc, p.epsilon), p.update)


def gated_gine_step(tape: Tape, h: Tensor, src: RowIndex, dst: RowIndex,
                    e_arc: Tensor, p: GineParams) -> Tensor:
    """h + SwiGLU(aggregate(norm(h))); p.update must be SwigluParams."""
    return ad.add(tape, h, message_pass(tape, h, src, dst, e_arc, p))


def gine_step(tape: Tape, h: Tensor, src: RowIndex, dst: RowIndex,
              e_arc: Tensor, p: GineParams) -> Tensor:
    """h + relu_mlp(aggregate(norm(h))); p.update must be MlpParams."""
    return ad.add(tape, h, message_pass(tape, h, src, dst, e_arc, p))
