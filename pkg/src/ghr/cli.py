"""Operator entry point: gen / train / eval / pool-stats / ablate / selfcheck.

Configuration is one JSON document. A "preset" key expands protocol defaults
(small_oor / large_oor) before any explicit section overrides apply; every
section then maps onto its dataclass. One master seed feeds the named
sub-streams (data, init, shuffle), so a config plus a seed pins every byte
of output. Exit codes: 0 success, 1 bad config/usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .baselines import FlatConfig, FlatModel
from .data import RGGConfig, build_splits, read_dataset, write_dataset
from .errors import GHRError
from .evaluate import (
    evaluate_model,
    write_ablation_csv,
    write_report_csv,
    write_report_json,
)
from .graphs import bfs_distances, diameter
from .model import GHRConfig, hierarchy_for
from .seeding import stream
from .training import GHRModel, TrainConfig, full_model_grad_check, train

GHR_VARIANTS = ("ghr_gated_gine", "ghr_gine")
FLAT_VARIANTS = ("deep_gine", "deep_gated_gine", "recurrent_gine",
                 "recurrent_gated_gine", "deep+gr", "recurrent+gr")
ALL_VARIANTS = GHR_VARIANTS + FLAT_VARIANTS

PRESETS = {
    "small_oor": {
        "data": {"n_min": 40, "n_max": 60, "avg_degree": 12.0, "distance_cap": 5,
                 "test_ceiling": 8, "split_sizes": [6000, 1000, 1000]},
        "model": {"m": 32, "r_steps": 4, "t_high": 3, "t_low": 6, "infer_t_low": 8},
        "train": {"learning_rate": 1e-3, "batch_size": 128, "epochs": 20},
        "flat": {"m": 32, "layers": 10, "iterations": 10},
    },
    "large_oor": {
        "data": {"n_min": 300, "n_max": 350, "avg_degree": 12.0, "distance_cap": 20,
                 "test_ceiling": 40, "test_n_min": 300, "test_n_max": 500,
                 "split_sizes": [6000, 1000, 1000]},
        "model": {"m": 32, "r_steps": 4, "t_high": 3, "t_low": 6, "infer_t_low": 8},
        "train": {"learning_rate": 1e-3, "batch_size": 128, "epochs": 20},
        "flat": {"m": 32, "layers": 20, "iterations": 20, "infer_iterations": 30},
    },
}

_SECTIONS = ("data", "model", "train", "flat")
_KNOWN_KEYS = set(_SECTIONS) | {"preset", "seed", "paths", "variant", "variants"}


@dataclass
class RunConfig:
    seed: int = 0
    data: RGGConfig = field(default_factory=RGGConfig)
    model: GHRConfig = field(default_factory=GHRConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    flat: FlatConfig = field(default_factory=FlatConfig)
    variant: str = "ghr_gated_gine"
    variants: tuple = ALL_VARIANTS
    dataset_dir: str = "dataset"
    checkpoint_path: str = "model.ckpt"
    report_dir: str = "reports"


def load_run_config(path: str | None = None, seed: int | None = None,
                    doc: dict | None = None) -> RunConfig:
    """Expand the preset, apply overrides, map sections onto dataclasses."""
    if path is not None:
        with open(path) as f:
            doc = json.load(f)
    doc = dict(doc or {})
    unknown = set(doc) - _KNOWN_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    preset = doc.get("preset")
    base: dict = {s: {} for s in _SECTIONS}
    if preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; have {sorted(PRESETS)}")
        for s in _SECTIONS:
            base[s].update(PRESETS[preset].get(s, {}))
    sections = {}
    for s in _SECTIONS:
        merged = dict(base[s])
        merged.update(doc.get(s, {}))
        sections[s] = merged
    master = seed if seed is not None else int(doc.get("seed", 0))
    sections["data"].setdefault("seed", master)
    sections["train"].setdefault("seed", master)
    paths = doc.get("paths", {})
    variant = doc.get("variant", "ghr_gated_gine")
    variants = tuple(doc.get("variants", ALL_VARIANTS))
    for v in (variant, *variants):
        if v not in ALL_VARIANTS:
            raise ValueError(f"unknown variant {v!r}; have {list(ALL_VARIANTS)}")
    return RunConfig(
        seed=master,
        data=RGGConfig.from_dict(sections["data"]),
        model=GHRConfig.from_dict(sections["model"]),
        train=TrainConfig.from_dict(sections["train"]),
        flat=FlatConfig.from_dict(sections["flat"]),
        variant=variant,
        variants=variants,
        dataset_dir=paths.get("dataset", "dataset"),
        checkpoint_path=paths.get("checkpoint", "model.ckpt"),
        report_dir=paths.get("reports", "reports"),
    )


def build_model(run: RunConfig, variant: str, dtype=None):
    """Fresh, seeded parameters for one named variant."""
    rng = stream(run.seed, "init", variant)
    dtype = dtype if dtype is not None else run.train.dtype
    if variant in GHR_VARIANTS:
        backbone = "gated_gine" if variant == "ghr_gated_gine" else "gine"
        cfg = run.model.with_overrides(backbone=backbone)
        return GHRModel.initialize(cfg, rng, dtype=dtype)
    mode = "deep" if variant.startswith("deep") else "recurrent"
    backbone = "gated_gine" if "gated" in variant else "gine"
    steps = run.model.r_steps if variant.endswith("+gr") else 1
    cfg = run.flat.with_overrides(mode=mode, backbone=backbone, global_steps=steps,
                                  gamma=run.model.gamma)
    return FlatModel.initialize(cfg, rng, dtype=dtype)


def _model_from_checkpoint(path: str, overrides: dict):
    store, meta = ad.load_checkpoint(path)
    variant = meta["variant"]
    if variant in GHR_VARIANTS:
        cfg = GHRConfig.from_dict(meta["model"])
        kw = {k: v for k, v in overrides.items() if v is not None}
        if kw:
            cfg = cfg.with_overrides(**{
                name: kw[flag] for flag, name in
                (("t_low", "infer_t_low"), ("t_high", "infer_t_high"), ("r", "infer_r_steps"))
                if flag in kw})
        return GHRModel.from_store(store, cfg), meta
    cfg = FlatConfig.from_dict(meta["model"])
    if overrides.get("t_low") is not None and cfg.mode == "recurrent":
        cfg = cfg.with_overrides(infer_iterations=overrides["t_low"])
    return FlatModel.from_store(store, cfg), meta


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen(run: RunConfig, out: str | None) -> int:
    target = out or run.dataset_dir
    splits = build_splits(run.data)
    write_dataset(target, splits)
    total = len(splits.train) + len(splits.val) + len(splits.test)
    print(f"wrote {total} instances to {target}")
    return 0


def _train_one(run: RunConfig, variant: str, dataset, verbose: bool):
    model = build_model(run, variant)
    store, log = train(model, dataset.train, dataset.val, run.train, verbose=verbose)
    meta = {
        "variant": variant,
        "model": model.config.to_dict(),
        "train": run.train.to_dict(),
        "train_cap": run.data.distance_cap,
    }
    return model, store, log, meta


def cmd_train(run: RunConfig, out: str | None, verbose: bool = True) -> int:
    dataset = read_dataset(run.dataset_dir)
    model, store, log, meta = _train_one(run, run.variant, dataset, verbose)
    ckpt = os.path.join(out, "model.ckpt") if out else run.checkpoint_path
    os.makedirs(os.path.dirname(ckpt) or ".", exist_ok=True)
    ad.save_checkpoint(ckpt, store, meta)
    prefix = os.path.splitext(ckpt)[0]
    log.write_csv(prefix + "_train_log.csv")
    log.write_jsonl(prefix + "_train_log.jsonl")
    print(f"checkpoint {ckpt}")
    print(f"val_mae {log.best_val_mae!r}")
    return 0


def cmd_eval(run: RunConfig, out: str | None, overrides: dict) -> int:
    model, meta = _model_from_checkpoint(run.checkpoint_path, overrides)
    dataset = read_dataset(run.dataset_dir)
    report = evaluate_model(model, dataset.test, train_cap=meta["train_cap"])
    target = out or run.report_dir
    os.makedirs(target, exist_ok=True)
    write_report_json(os.path.join(target, "report.json"), report)
    write_report_csv(os.path.join(target, "report.csv"), report)
    oor = "absent" if report.oor_mae is None else repr(report.oor_mae)
    print(f"test_mae {report.test_mae!r} id_mae {report.id_mae!r} oor_mae {oor} "
          f"max_pred {report.max_predicted_distance!r}")
    return 0


def cmd_pool_stats(run: RunConfig, out: str | None) -> int:
    dataset = read_dataset(run.dataset_dir)
    target = out or run.report_dir
    os.makedirs(target, exist_ok=True)
    rows = []
    for split, instances in (("train", dataset.train), ("val", dataset.val),
                             ("test", dataset.test)):
        for i, inst in enumerate(instances):
            h = hierarchy_for(inst.graph, run.model)
            dl, dh = diameter(h.low), diameter(h.high)
            rows.append((split, i, inst.graph.num_nodes, int(dl), int(dh)))
    path = os.path.join(target, "pool_stats.csv")
    with open(path, "w") as f:
        f.write("split,index,num_nodes,diam_low,diam_high,ratio\n")
        for split, i, n, dl, dh in rows:
            ratio = repr(dh / dl) if dl > 0 else ""
            f.write(f"{split},{i},{n},{dl},{dh},{ratio}\n")
    # binned summary over all splits: node-count buckets of ten
    summary_path = os.path.join(target, "pool_stats_summary.csv")
    bins: dict[int, list] = {}
    for _, _, n, dl, dh in rows:
        bins.setdefault(n // 10 * 10, []).append((dl, dh))
    with open(summary_path, "w") as f:
        f.write("nodes_from,nodes_to,count,mean_diam_low,mean_diam_high\n")
        for lo in sorted(bins):
            pairs = bins[lo]
            mdl = sum(p[0] for p in pairs) / len(pairs)
            mdh = sum(p[1] for p in pairs) / len(pairs)
            f.write(f"{lo},{lo + 9},{len(pairs)},{mdl!r},{mdh!r}\n")
    print(f"wrote {path} and {summary_path}")
    return 0


def cmd_ablate(run: RunConfig, out: str | None, verbose: bool = True) -> int:
    dataset = read_dataset(run.dataset_dir)
    target = out or run.report_dir
    os.makedirs(target, exist_ok=True)
    rows = []
    for variant in run.variants:
        if verbose:
            print(f"training {variant}", file=sys.stderr)
        model, store, log, meta = _train_one(run, variant, dataset, verbose=False)
        report = evaluate_model(model, dataset.test, train_cap=meta["train_cap"])
        write_report_json(os.path.join(target, f"report_{variant.replace('+', '_')}.json"),
                          report)
        rows.append({"model_variant": variant, "test_mae": report.test_mae,
                     "id_mae": report.id_mae, "oor_mae": report.oor_mae,
                     "max_pred": report.max_predicted_distance})
    path = os.path.join(target, "ablation.csv")
    write_ablation_csv(path, rows)
    print(f"wrote {path}")
    return 0


def _check(name: str, ok: bool, detail: str = "") -> bool:
    print(f"{name}: {'PASS' if ok else 'FAIL'}{' ' + detail if detail else ''}")
    return ok


def _permuted_copy(h, rng):
    """Same hierarchy under a random simultaneous node/cluster relabeling."""
    from .graphs import build_graph
    from .hierarchy import ClusterAssignment, Hierarchy, quotient_graph

    g = h.low
    n = g.num_nodes
    q = rng.permutation(n)
    inv = np.empty(n, dtype=np.int64)
    inv[q] = np.arange(n)
    g2 = build_graph(n, [(int(q[u]), int(q[v])) for u, v in g.edges.tolist()],
                     g.node_features[inv], g.edge_features,
                     positions=None if g.positions is None else g.positions[inv])
    cq = rng.permutation(h.assignment.num_clusters)
    a2 = ClusterAssignment(cq[h.assignment.cluster_of[inv]], h.assignment.num_clusters)
    high2 = quotient_graph(g2, a2, edge_reduce="sum", node_reduce=h.feature_reduce)
    return Hierarchy(low=g2, high=high2, assignment=a2,
                     feature_reduce=h.feature_reduce), q


def cmd_selfcheck() -> int:
    from .data import generate_instance
    from .model import forward, make_bundle

    rng_cfg = RGGConfig(n_min=10, n_max=14, distance_cap=4)
    insts = [generate_instance(rng_cfg, stream(0, "selfcheck", i)) for i in range(10)]
    ok = True

    config = GHRConfig(m=6, r_steps=2, t_high=1, t_low=2, pool_iterations=2)
    model = GHRModel.initialize(config, np.random.default_rng(0))
    err = full_model_grad_check(model, insts[0], max_entries_per_param=4,
                                rng=np.random.default_rng(0))
    ok &= _check("gradient-check", err <= 1e-4, f"(max rel err {err:.2e})")

    violations = 0
    for inst in insts:
        g = inst.graph
        h = hierarchy_for(g, config)
        dist_low = [bfs_distances(g, s).finite_hops() for s in range(g.num_nodes)]
        dist_high = [bfs_distances(h.high, c).finite_hops()
                     for c in range(h.high.num_nodes)]
        c_of = h.assignment.cluster_of
        for u in range(g.num_nodes):
            for v in range(g.num_nodes):
                if dist_high[c_of[u]][c_of[v]] > dist_low[u][v]:
                    violations += 1
        if diameter(h.high) > diameter(h.low):
            violations += 1
    ok &= _check("pooling-contraction", violations == 0, f"({violations} violations)")

    worst = 0.0
    perm_rng = np.random.default_rng(7)
    for inst in insts[:3]:
        h = hierarchy_for(inst.graph, config)
        x = inst.node_features()
        base = forward(Tape(), make_bundle(h, config, node_features=x),
                       model.params, config).predictions[-1].data
        h2, q = _permuted_copy(h, perm_rng)
        out2 = forward(Tape(), make_bundle(h2, config, node_features=x[np.argsort(q)]),
                       model.params, config).predictions[-1].data
        worst = max(worst, float(np.max(np.abs(out2[q] - base))))
    ok &= _check("permutation-equivariance", worst <= 1e-9, f"(max drift {worst:.2e})")

    frozen = GHRModel.initialize(config, np.random.default_rng(1))
    for p in frozen.store.params():
        if p.trainable:
            p.value.data[:] = 0.0
    preds = frozen.forward(Tape(), frozen.prepare(insts[0]))
    fixed = all(np.array_equal(p.data, np.zeros_like(p.data)) for p in preds)
    ok &= _check("zero-weight-fixed-point", fixed)

    label_errors = 0
    for inst in insts[:5]:
        g = inst.graph
        n = g.num_nodes
        dist = np.full((n, n), n + 1, dtype=np.int64)
        np.fill_diagonal(dist, 0)
        for u, v in g.edges.tolist():
            dist[u, v] = dist[v, u] = 1
        for k in range(n):
            dist = np.minimum(dist, dist[:, k:k + 1] + dist[k:k + 1, :])
        if not np.array_equal(dist[inst.source], inst.labels.finite_hops()):
            label_errors += 1
    ok &= _check("shortest-path-labels", label_errors == 0)

    return 0 if ok else 2


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ghr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen", "train", "eval", "pool-stats", "ablate"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", default=None)
        if name == "eval":
            p.add_argument("--t-low", type=int, default=None)
            p.add_argument("--t-high", type=int, default=None)
            p.add_argument("--r", type=int, default=None)
    sub.add_parser("selfcheck")
    args = parser.parse_args(argv)

    if args.command == "selfcheck":
        try:
            return cmd_selfcheck()
        except Exception as e:  # noqa: BLE001 - report, not crash
            print(f"selfcheck error: {e}", file=sys.stderr)
            return 2

    try:
        run = load_run_config(args.config, seed=args.seed)
    except (OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1

    try:
        if args.command == "gen":
            return cmd_gen(run, args.out)
        if args.command == "train":
            return cmd_train(run, args.out)
        if args.command == "eval":
            overrides = {"t_low": args.t_low, "t_high": args.t_high, "r": args.r}
            return cmd_eval(run, args.out, overrides)
        if args.command == "pool-stats":
            return cmd_pool_stats(run, args.out)
        if args.command == "ablate":
            return cmd_ablate(run, args.out)
    except (GHRError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
