"""Training: discounted BPTT loss, adaptive-moment optimizer, epoch loop.

The loop is deliberately plain: shuffled mini-batches, one tape per graph,
gradients accumulated in graph index order, one optimizer step per batch.
Hierarchies are built once per graph and cached for the run.
"""

from __future__ import annotations

import csv
import json
import math
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape, Tensor
from .data import SSSPInstance
from .model import (
    GHRConfig,
    GHRParams,
    forward,
    hierarchy_for,
    init_ghr_params,
    make_bundle,
    params_from_store,
)
from .seeding import stream

_PRECISIONS = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 20
    loss_kind: str = "l1"
    gamma: float = 0.8
    optimizer: tuple = (0.9, 0.999, 1e-8)
    seed: int = 0
    gradient_clip_norm: float | None = None
    precision: str = "float64"

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.loss_kind not in ("l1", "mse"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if len(self.optimizer) != 3:
            raise ValueError("optimizer expects (beta1, beta2, eps)")
        if self.gradient_clip_norm is not None and self.gradient_clip_norm < 0:
            raise ValueError("gradient_clip_norm must be >= 0 or None")
        if self.precision not in _PRECISIONS:
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return _PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "loss_kind": self.loss_kind,
            "gamma": self.gamma,
            "optimizer": list(self.optimizer),
            "seed": self.seed,
            "gradient_clip_norm": self.gradient_clip_norm,
            "precision": self.precision,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "optimizer" in d:
            d["optimizer"] = tuple(d["optimizer"])
        return TrainConfig(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mae: float = math.inf

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "train_loss", "val_mae", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_mae), repr(r.seconds)])

    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps({"epoch": r.epoch, "train_loss": r.train_loss,
                                    "val_mae": r.val_mae, "seconds": r.seconds}) + "\n")


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def loss_targets(instance: SSSPInstance, dtype=np.float64) -> tuple[Tensor, Tensor]:
    """Target and mask columns in the form the masked loss ops consume."""
    target = ad.tensor(instance.target_vector(), dtype=dtype)
    mask = ad.tensor(instance.mask.reshape(-1, 1).astype(dtype), dtype=dtype)
    return target, mask


def discounted_loss(tape: Tape, preds, target: Tensor, mask: Tensor,
                    gamma: float, loss_kind: str = "l1") -> Tensor:
    """Discount-weighted sum of per-step masked losses.

    Step r of R is weighted gamma**(R - r), so the final prediction always
    carries weight 1 and earlier ones fade geometrically. gamma = 1 is the
    plain sum (no scaling op is recorded, keeping it exact).
    """
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    op = ad.l1_masked if loss_kind == "l1" else ad.mse_masked
    r_steps = len(preds)
    total = None
    for r, pred in enumerate(preds, start=1):
        step_loss = op(tape, pred, target, mask)
        weight = gamma ** (r_steps - r)
        if weight != 1.0:
            step_loss = ad.scale_by_constant(tape, step_loss, weight)
        total = step_loss if total is None else ad.add(tape, total, step_loss)
    return total


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

def global_grad_norm(store: ParamStore) -> float:
    total = 0.0
    for p in store.params():
        if p.trainable:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def optimizer_step(store: ParamStore, cfg: TrainConfig, step_index: int) -> None:
    """Bias-corrected adaptive-moment update; clips first, zeroes grads after."""
    beta1, beta2, eps = cfg.optimizer
    scale = 1.0
    if cfg.gradient_clip_norm is not None:
        norm = global_grad_norm(store)
        if norm > cfg.gradient_clip_norm:
            scale = cfg.gradient_clip_norm / norm
    c1 = 1.0 - beta1 ** step_index
    c2 = 1.0 - beta2 ** step_index
    for p in store.params():
        if not p.trainable:
            p.grad[:] = 0.0
            continue
        g = p.grad if scale == 1.0 else p.grad * scale
        if "m" not in p.slots:
            p.slots["m"] = np.zeros_like(p.value.data)
            p.slots["v"] = np.zeros_like(p.value.data)
        m, v = p.slots["m"], p.slots["v"]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.value.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad[:] = 0.0


# --------------------------------------------------------------------------
# model adapter
# --------------------------------------------------------------------------

class GHRModel:
    """Parameters plus per-instance preparation, as the train loop expects.

    Any object with .store, .prepare(instance) and .forward(tape, prepared,
    inference=) can be trained; the flat baselines provide the same surface.
    """

    def __init__(self, config: GHRConfig, params: GHRParams):
        self.config = config
        self.params = params
        self.store = params.store
        self.dtype = params.readout.data.dtype.type

    @classmethod
    def initialize(cls, config: GHRConfig, rng: np.random.Generator,
                   dtype=np.float64) -> "GHRModel":
        params = init_ghr_params(config, rng)
        if dtype is not np.float64:
            return cls(config, params_from_store(params.store.astype(dtype), config))
        return cls(config, params)

    @classmethod
    def from_store(cls, store: ParamStore, config: GHRConfig) -> "GHRModel":
        return cls(config, params_from_store(store, config))

    def prepare(self, instance: SSSPInstance):
        h = hierarchy_for(instance.graph, self.config)
        return make_bundle(h, self.config, dtype=self.dtype,
                           node_features=instance.node_features())

    def forward(self, tape: Tape, prepared, inference: bool = False):
        return forward(tape, prepared, self.params, self.config, inference).predictions


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

def _prepared(model, instances, cache, idx):
    if cache[idx] is None:
        inst = instances[idx]
        cache[idx] = (model.prepare(inst), *loss_targets(inst, model.dtype))
    return cache[idx]


def validation_mae(model, val_set, cache=None) -> float:
    """Mean absolute error of the final-step prediction over masked-in nodes."""
    if cache is None:
        cache = [None] * len(val_set)
    err, count = 0.0, 0
    for i, inst in enumerate(val_set):
        bundle, _, _ = _prepared(model, val_set, cache, i)
        pred = model.forward(Tape(), bundle)[-1].data[:, 0]
        hops = inst.labels.finite_hops()
        err += float(np.abs(pred[inst.mask] - hops[inst.mask]).sum())
        count += int(inst.mask.sum())
    return err / count


def train(model, train_set, val_set, cfg: TrainConfig,
          verbose: bool = False) -> tuple[ParamStore, TrainLog]:
    """Run the epoch loop and leave the best-validation weights in the store."""
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be nonempty")
    store = model.store
    gamma = cfg.gamma
    train_cache = [None] * len(train_set)
    val_cache = [None] * len(val_set)
    log = TrainLog()
    best_weights = {p.name: p.value.data.copy() for p in store.params()}
    step_index = 0
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        order = stream(cfg.seed, "shuffle", epoch).permutation(len(train_set))
        loss_sum = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            for idx in batch:
                bundle, target, mask = _prepared(model, train_set, train_cache, int(idx))
                tape = Tape()
                preds = model.forward(tape, bundle)
                loss = discounted_loss(tape, preds, target, mask, gamma, cfg.loss_kind)
                loss_sum += float(loss.data[0, 0])
                averaged = ad.scale_by_constant(tape, loss, 1.0 / len(batch))
                ad.backward(tape, averaged, store)
            step_index += 1
            optimizer_step(store, cfg, step_index)
        val_mae = validation_mae(model, val_set, val_cache)
        record = EpochRecord(epoch=epoch, train_loss=loss_sum / len(order),
                             val_mae=val_mae, seconds=time.perf_counter() - started)
        log.records.append(record)
        if val_mae < log.best_val_mae:
            log.best_val_mae = val_mae
            log.best_epoch = epoch
            for p in store.params():
                best_weights[p.name] = p.value.data.copy()
        if verbose:
            print(f"epoch {epoch}: train_loss {record.train_loss:.4f} "
                  f"val_mae {val_mae:.4f} ({record.seconds:.1f}s)", file=sys.stderr)
    for p in store.params():
        p.value.data[:] = best_weights[p.name]
    return store, log


# --------------------------------------------------------------------------
# gradient self-check
# --------------------------------------------------------------------------

def full_model_grad_check(model, instance: SSSPInstance, loss_kind: str = "l1",
                          step: float = 1e-5, max_entries_per_param: int | None = None,
                          rng: np.random.Generator | None = None) -> float:
    """Finite-difference check of discounted_loss∘forward on one instance."""
    if model.dtype is not np.float64:
        raise ValueError("gradient checks require float64 parameters")
    bundle = model.prepare(instance)
    target, mask = loss_targets(instance, model.dtype)

    def build(tape):
        preds = model.forward(tape, bundle)
        return discounted_loss(tape, preds, target, mask, model.config.gamma, loss_kind)

    return ad.finite_difference_check(build, model.store, step=step,
                                      max_entries_per_param=max_entries_per_param, rng=rng)
