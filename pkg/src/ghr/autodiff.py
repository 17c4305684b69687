"""Reverse-mode automatic differentiation over dense 2-D tensors.

The primitive set is closed and small: matrix product, broadcast add,
elementwise products and nonlinearities, row gather/scatter over graph arcs,
row-wise RMS normalization, column concatenation, and masked reduction
losses. Everything higher-level (message passing, gating, readouts) is a
composition of these, so one finite-difference harness validates the whole
stack.

A :class:`Tape` records each primitive application in topological order;
:func:`backward` walks it once in reverse, freeing intermediate gradients as
soon as their producer has been processed. Scatter summation order is fixed
(ascending row position), which makes forward *and* gradient values
reproducible bit-for-bit.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import EmptyMask, IndexOutOfRange, LossNotScalar, ShapeMismatch

_RMS_EPS = 1e-8

_CHECKPOINT_MAGIC = b"GHCK"
_CHECKPOINT_VERSION = 1


class Tensor:
    """A rows x cols matrix of real values; the unit all primitives act on."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data)
        if arr.ndim != 2:
            raise ShapeMismatch(f"tensors are strictly 2-D, got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def __repr__(self):
        return f"Tensor{self.shape}"


def tensor(values, dtype=np.float64) -> Tensor:
    """Wrap values as a constant (non-trainable) leaf tensor."""
    return Tensor(np.ascontiguousarray(values, dtype=dtype))


class RowIndex:
    """A row index vector shared by gather and scatter-add.

    ``num_rows`` is the size of the "long" side: the input of a gather and the
    output of a scatter. The scatter matrix is cached per dtype; its rows sum
    their entries in ascending source position, fixing the summation order.
    """

    __slots__ = ("indices", "num_rows", "_scatter")

    def __init__(self, indices, num_rows: int):
        idx = np.ascontiguousarray(indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ShapeMismatch("row indices must be a 1-D vector")
        if idx.shape[0] and (idx.min() < 0 or idx.max() >= num_rows):
            raise IndexOutOfRange(f"row index outside [0, {num_rows})")
        idx.setflags(write=False)
        self.indices = idx
        self.num_rows = num_rows
        self._scatter = {}

    def __len__(self) -> int:
        return self.indices.shape[0]

    def scatter_matrix(self, dtype) -> sp.csr_matrix:
        key = np.dtype(dtype).str
        if key not in self._scatter:
            k = len(self)
            m = sp.csr_matrix(
                (np.ones(k, dtype=dtype), (self.indices, np.arange(k))),
                shape=(self.num_rows, k),
            )
            m.sort_indices()
            self._scatter[key] = m
        return self._scatter[key]


class TapeEntry:
    __slots__ = ("op", "inputs", "aux", "out")

    def __init__(self, op: str, inputs: tuple, aux, out: Tensor):
        self.op = op
        self.inputs = inputs
        self.aux = aux
        self.out = out


class Tape:
    """Append-only record of primitive applications, in execution order."""

    __slots__ = ("entries",)

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def replay_matches(self) -> bool:
        """Recompute every entry from its recorded inputs; True iff all
        outputs are bit-identical to the first pass."""
        for e in self.entries:
            fresh = _FORWARD[e.op]([t.data for t in e.inputs], e.aux)[0]
            if not np.array_equal(fresh, e.out.data):
                return False
        return True


# --------------------------------------------------------------------------
# forward implementations: fn(list of input arrays, aux) -> (out array, saved)
# saved values are stashed in aux slot 1 when the adjoint needs them
# --------------------------------------------------------------------------

def _fw_matmul(xs, aux):
    a, b = xs
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dims {a.shape} @ {b.shape}")
    return a @ b, None


def _fw_add(xs, aux):
    a, b = xs
    if a.shape != b.shape:
        row_a = a.shape[0] == 1 and a.shape[1] == b.shape[1]
        row_b = b.shape[0] == 1 and b.shape[1] == a.shape[1]
        if not (row_a or row_b):
            raise ShapeMismatch(f"add shapes {a.shape} vs {b.shape}")
    return a + b, None


def _fw_hadamard(xs, aux):
    a, b = xs
    if a.shape != b.shape:
        raise ShapeMismatch(f"hadamard shapes {a.shape} vs {b.shape}")
    return a * b, None


def _fw_relu(xs, aux):
    return np.maximum(xs[0], 0), None


def _fw_sigmoid(xs, aux):
    x = xs[0]
    out = np.empty_like(x)
    np.negative(np.abs(x), out=out)
    np.exp(out, out=out)  # e^{-|x|} in (0, 1]: overflow-safe
    np.divide(out, 1.0 + out, out=out)
    np.copyto(out, 1.0 - out, where=x >= 0)
    return out, None


def _fw_swish(xs, aux):
    x = xs[0]
    s = _fw_sigmoid(xs, None)[0]
    return x * s, s


def _fw_gather(xs, aux):
    rix: RowIndex = aux
    x = xs[0]
    if x.shape[0] != rix.num_rows:
        raise ShapeMismatch(f"gather from {x.shape[0]} rows with index over {rix.num_rows}")
    return x[rix.indices], None


def _fw_scatter(xs, aux):
    rix: RowIndex = aux
    v = xs[0]
    if v.shape[0] != len(rix):
        raise ShapeMismatch(f"scatter of {v.shape[0]} rows with {len(rix)} indices")
    out = rix.scatter_matrix(v.dtype) @ v
    return np.ascontiguousarray(out), None


def _fw_rms_norm(xs, aux):
    x, w = xs
    if w.shape != (1, x.shape[1]):
        raise ShapeMismatch(f"rms weight must be 1x{x.shape[1]}, got {w.shape}")
    s = np.sqrt(np.mean(x * x, axis=1, keepdims=True) + _RMS_EPS)
    return (x / s) * w, s


def _fw_concat_cols(xs, aux):
    rows = xs[0].shape[0]
    for x in xs[1:]:
        if x.shape[0] != rows:
            raise ShapeMismatch("concat_cols row counts differ")
    return np.concatenate(xs, axis=1), None


def _fw_scale(xs, aux):
    return xs[0] * aux, None


def _fw_sum_all(xs, aux):
    x = xs[0]
    return np.array([[x.sum()]], dtype=x.dtype), None


def _masked_setup(xs):
    p, t, m = xs
    if not (p.shape == t.shape == m.shape) or p.shape[1] != 1:
        raise ShapeMismatch(f"loss operands must share shape [n x 1]: {p.shape} {t.shape} {m.shape}")
    k = m.sum()
    if k <= 0:
        raise EmptyMask("mask selects no rows")
    return p, t, m, k


def _fw_l1_masked(xs, aux):
    p, t, m, k = _masked_setup(xs)
    diff = p - t
    val = np.array([[float((m * np.abs(diff)).sum() / k)]], dtype=p.dtype)
    return val, (diff, k)


def _fw_mse_masked(xs, aux):
    p, t, m, k = _masked_setup(xs)
    diff = p - t
    val = np.array([[float((m * diff * diff).sum() / k)]], dtype=p.dtype)
    return val, (diff, k)


_FORWARD: dict[str, Callable] = {
    "matmul": _fw_matmul,
    "add": _fw_add,
    "hadamard": _fw_hadamard,
    "relu": _fw_relu,
    "sigmoid": _fw_sigmoid,
    "swish": _fw_swish,
    "gather_rows": _fw_gather,
    "scatter_add_rows": _fw_scatter,
    "rms_norm": _fw_rms_norm,
    "concat_cols": _fw_concat_cols,
    "scale_by_constant": _fw_scale,
    "sum_all": _fw_sum_all,
    "l1_masked": _fw_l1_masked,
    "mse_masked": _fw_mse_masked,
}


# --------------------------------------------------------------------------
# adjoints: fn(grad wrt out, entry) -> per-input grads (None = no gradient)
# --------------------------------------------------------------------------

def _unbroadcast_rows(grad, shape):
    if grad.shape == shape:
        return grad
    return grad.sum(axis=0, keepdims=True)


def _bw_matmul(g, e):
    a, b = (t.data for t in e.inputs)
    return g @ b.T, a.T @ g


def _bw_add(g, e):
    a, b = (t.data for t in e.inputs)
    return _unbroadcast_rows(g, a.shape), _unbroadcast_rows(g, b.shape)


def _bw_hadamard(g, e):
    a, b = (t.data for t in e.inputs)
    return g * b, g * a


def _bw_relu(g, e):
    return (g * (e.out.data > 0),)


def _bw_sigmoid(g, e):
    s = e.out.data
    return (g * s * (1.0 - s),)


def _bw_swish(g, e):
    x = e.inputs[0].data
    s = e.aux
    return (g * (s * (1.0 + x * (1.0 - s))),)


def _bw_gather(g, e):
    rix: RowIndex = e.aux
    return (np.ascontiguousarray(rix.scatter_matrix(g.dtype) @ g),)


def _bw_scatter(g, e):
    rix: RowIndex = e.aux
    return (g[rix.indices],)


def _bw_rms_norm(g, e):
    x, w = (t.data for t in e.inputs)
    s = e.aux
    d = x.shape[1]
    gw = g * w
    dot = (gw * x).sum(axis=1, keepdims=True)
    dx = gw / s - x * (dot / (d * s ** 3))
    dw = (g * x / s).sum(axis=0, keepdims=True)
    return dx, dw


def _bw_concat_cols(g, e):
    grads, at = [], 0
    for t in e.inputs:
        grads.append(np.ascontiguousarray(g[:, at:at + t.cols]))
        at += t.cols
    return tuple(grads)


def _bw_scale(g, e):
    return (g * e.aux,)


def _bw_sum_all(g, e):
    x = e.inputs[0].data
    return (np.full_like(x, g[0, 0]),)


def _bw_l1_masked(g, e):
    diff, k = e.aux
    m = e.inputs[2].data
    return g[0, 0] * m * np.sign(diff) / k, None, None


def _bw_mse_masked(g, e):
    diff, k = e.aux
    m = e.inputs[2].data
    return g[0, 0] * 2.0 * m * diff / k, None, None


_BACKWARD: dict[str, Callable] = {
    "matmul": _bw_matmul,
    "add": _bw_add,
    "hadamard": _bw_hadamard,
    "relu": _bw_relu,
    "sigmoid": _bw_sigmoid,
    "swish": _bw_swish,
    "gather_rows": _bw_gather,
    "scatter_add_rows": _bw_scatter,
    "rms_norm": _bw_rms_norm,
    "concat_cols": _bw_concat_cols,
    "scale_by_constant": _bw_scale,
    "sum_all": _bw_sum_all,
    "l1_masked": _bw_l1_masked,
    "mse_masked": _bw_mse_masked,
}


def record(tape: Tape, op: str, *operands: Tensor, aux=None) -> Tensor:
    """Apply a primitive, record it on the tape, return the output tensor."""
    fn = _FORWARD.get(op)
    if fn is None:
        raise KeyError(f"unknown primitive {op!r}")
    out_arr, saved = fn([t.data for t in operands], aux)
    out_arr.setflags(write=False)
    out = Tensor(out_arr)
    tape.entries.append(TapeEntry(op, operands, saved if saved is not None else aux, out))
    return out


# thin named wrappers — layer code reads better with these

def matmul(tape, a, b):
    return record(tape, "matmul", a, b)


def add(tape, a, b):
    return record(tape, "add", a, b)


def hadamard(tape, a, b):
    return record(tape, "hadamard", a, b)


def relu(tape, x):
    return record(tape, "relu", x)


def sigmoid(tape, x):
    return record(tape, "sigmoid", x)


def swish(tape, x):
    return record(tape, "swish", x)


def gather_rows(tape, x, rix: RowIndex):
    return record(tape, "gather_rows", x, aux=rix)


def scatter_add_rows(tape, values, rix: RowIndex):
    return record(tape, "scatter_add_rows", values, aux=rix)


def rms_norm(tape, x, weight):
    return record(tape, "rms_norm", x, weight)


def concat_cols(tape, *xs):
    return record(tape, "concat_cols", *xs)


def scale_by_constant(tape, x, c: float):
    return record(tape, "scale_by_constant", x, aux=float(c))


def sum_all(tape, x):
    return record(tape, "sum_all", x)


def l1_masked(tape, pred, target, mask):
    return record(tape, "l1_masked", pred, target, mask)


def mse_masked(tape, pred, target, mask):
    return record(tape, "mse_masked", pred, target, mask)


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

class Param:
    __slots__ = ("name", "value", "grad", "slots", "trainable")

    def __init__(self, name: str, value: Tensor, trainable: bool):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value.data)
        self.slots: dict[str, np.ndarray] = {}
        self.trainable = trainable


class ParamStore:
    """Named parameters with gradient accumulators and optimizer slots.

    Iteration order is insertion order, which fixes optimizer update order
    and checkpoint layout.
    """

    def __init__(self):
        self._by_name: dict[str, Param] = {}

    def add(self, name: str, values, trainable: bool = True) -> Tensor:
        if name in self._by_name:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Param(name, Tensor(np.ascontiguousarray(values)), trainable)
        self._by_name[name] = p
        return p.value

    def __getitem__(self, name: str) -> Param:
        return self._by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __len__(self) -> int:
        return len(self._by_name)

    def params(self) -> list[Param]:
        return list(self._by_name.values())

    def names(self) -> list[str]:
        return list(self._by_name)

    def zero_grads(self) -> None:
        for p in self._by_name.values():
            p.grad[:] = 0.0

    def total_size(self) -> int:
        return sum(p.value.data.size for p in self._by_name.values())

    def astype(self, dtype) -> "ParamStore":
        """Copy with every value (and fresh zero grads) in the given dtype."""
        out = ParamStore()
        for p in self._by_name.values():
            out.add(p.name, p.value.data.astype(dtype), trainable=p.trainable)
        return out


def backward(tape: Tape, loss: Tensor, params: ParamStore) -> None:
    """Accumulate d loss / d p into every parameter's gradient buffer.

    Walks the tape once in reverse. A produced tensor's gradient is complete
    when its producing entry is reached (each record() output is distinct),
    so it is popped and released immediately after distribution.
    """
    if loss.shape != (1, 1):
        raise LossNotScalar(f"loss must be 1x1, got {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1), dtype=loss.data.dtype)}
    for e in reversed(tape.entries):
        g = grads.pop(id(e.out), None)
        if g is None:
            continue
        for t, gin in zip(e.inputs, _BACKWARD[e.op](g, e)):
            if gin is None:
                continue
            k = id(t)
            if k in grads:
                grads[k] = grads[k] + gin
            else:
                grads[k] = gin
    for p in params.params():
        g = grads.get(id(p.value))
        if g is not None:
            p.grad += g


def finite_difference_check(build: Callable[[Tape], Tensor], params: ParamStore,
                            step: float = 1e-5, max_entries_per_param: int | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients against central differences.

    ``build`` constructs the loss on a fresh tape from current parameter
    values. Returns the worst relative error over all checked entries, with
    denominator max(|analytic|, |numeric|, 1e-12). By default every element
    of every trainable parameter is checked; cap with
    ``max_entries_per_param`` (seeded subsample) for large models.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    tape = Tape()
    loss = build(tape)
    params.zero_grads()
    backward(tape, loss, params)
    analytic = {p.name: p.grad.copy() for p in params.params() if p.trainable}

    worst = 0.0
    for p in params.params():
        if not p.trainable:
            continue
        flat = p.value.data.reshape(-1)
        n = flat.shape[0]
        if max_entries_per_param is not None and n > max_entries_per_param:
            r = rng if rng is not None else np.random.default_rng(0)
            picks = r.choice(n, size=max_entries_per_param, replace=False)
        else:
            picks = range(n)
        ana = analytic[p.name].reshape(-1)
        for i in picks:
            keep = flat[i]
            flat[i] = keep + step
            up = float(build(Tape()).data[0, 0])
            flat[i] = keep - step
            down = float(build(Tape()).data[0, 0])
            flat[i] = keep
            numeric = (up - down) / (2.0 * step)
            denom = max(abs(ana[i]), abs(numeric), 1e-12)
            worst = max(worst, abs(ana[i] - numeric) / denom)
    return worst


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path, params: ParamStore, config: dict) -> None:
    """Write parameters + config snapshot in the flat binary format."""
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", _CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        plist = params.params()
        fh.write(struct.pack("<I", len(plist)))
        for p in plist:
            name = p.name.encode("utf-8")
            arr = np.ascontiguousarray(p.value.data)
            width = arr.dtype.itemsize
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<IIIB", arr.shape[0], arr.shape[1], width, 1 if p.trainable else 0))
            fh.write(arr.astype(f"<f{width}").tobytes())


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    """Read a checkpoint back into a fresh ParamStore plus its config dict."""
    with open(path, "rb") as fh:
        if fh.read(4) != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, blob_len = struct.unpack("<II", fh.read(8))
        if version != _CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        config = json.loads(fh.read(blob_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        store = ParamStore()
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            rows, cols, width, trainable = struct.unpack("<IIIB", fh.read(13))
            data = np.frombuffer(fh.read(rows * cols * width), dtype=f"<f{width}")
            store.add(name, data.reshape(rows, cols).astype(f"f{width}"),
                      trainable=bool(trainable))
    return store, config
