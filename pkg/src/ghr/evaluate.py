"""Evaluation: per-distance error strata, ID/OOR reports, report files.

A report always derives from final-step predictions. "ID" rows are nodes
whose true distance fits inside the training cap; "OOR" rows lie beyond it
(test instances may contain labels up to the test ceiling). The maximum
predicted distance is kept raw — extrapolation reach is the point of it.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .errors import EmptyMask, ShapeMismatch


@dataclass
class EvalReport:
    per_distance: dict[int, tuple[float, int]] = field(default_factory=dict)
    id_mae: float | None = None
    oor_mae: float | None = None
    test_mae: float = 0.0
    max_predicted_distance: float = 0.0
    train_cap: int = 0
    node_count: int = 0

    def to_dict(self) -> dict:
        d = {
            "test_mae": self.test_mae,
            "id_mae": self.id_mae,
            "max_predicted_distance": self.max_predicted_distance,
            "train_cap": self.train_cap,
            "node_count": self.node_count,
            "per_distance": {str(k): {"mae": v[0], "count": v[1]}
                             for k, v in sorted(self.per_distance.items())},
        }
        if self.oor_mae is not None:
            d["oor_mae"] = self.oor_mae
        return d

    @staticmethod
    def from_dict(d: dict) -> "EvalReport":
        return EvalReport(
            per_distance={int(k): (v["mae"], v["count"])
                          for k, v in d["per_distance"].items()},
            id_mae=d["id_mae"],
            oor_mae=d.get("oor_mae"),
            test_mae=d["test_mae"],
            max_predicted_distance=d["max_predicted_distance"],
            train_cap=d["train_cap"],
            node_count=d["node_count"],
        )


def _column(a) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim == 2 and a.shape[1] == 1:
        a = a[:, 0]
    if a.ndim != 1:
        raise ShapeMismatch(f"expected a vector, got shape {a.shape}")
    return a


def stratified_mae(preds, labels, mask) -> dict[int, tuple[float, int]]:
    """Group masked-in nodes by integer label; MAE and count per group."""
    p, y, m = _column(preds), _column(labels), _column(mask).astype(bool)
    if not (p.shape == y.shape == m.shape):
        raise ShapeMismatch(f"length mismatch: {p.shape} vs {y.shape} vs {m.shape}")
    out: dict[int, tuple[float, int]] = {}
    err = np.abs(p[m] - y[m])
    lab = y[m].astype(np.int64)
    for d in np.unique(lab):
        sel = lab == d
        out[int(d)] = (float(err[sel].mean()), int(sel.sum()))
    return out


def id_oor_report(preds, labels, masks, train_cap: int) -> EvalReport:
    """Merge per-instance results into one report partitioned at the cap.

    ``preds``/``labels``/``masks`` are parallel sequences with one entry per
    instance (final-step predictions, integer labels, inclusion masks).
    """
    if train_cap <= 0:
        raise ValueError("train_cap must be positive")
    all_p, all_y = [], []
    for p, y, m in zip(preds, labels, masks):
        p, y, m = _column(p), _column(y), _column(m).astype(bool)
        all_p.append(p[m])
        all_y.append(y[m])
    p = np.concatenate(all_p) if all_p else np.empty(0)
    y = np.concatenate(all_y) if all_y else np.empty(0)
    if p.size == 0:
        raise EmptyMask("no masked-in nodes to evaluate")
    err = np.abs(p - y)
    is_id = y <= train_cap
    report = EvalReport(
        per_distance=stratified_mae(p, y, np.ones(p.size, dtype=bool)),
        id_mae=float(err[is_id].mean()) if is_id.any() else None,
        oor_mae=float(err[~is_id].mean()) if (~is_id).any() else None,
        test_mae=float(err.mean()),
        max_predicted_distance=float(p.max()),
        train_cap=train_cap,
        node_count=int(p.size),
    )
    return report


def evaluate_model(model, instances, train_cap: int, inference: bool = True) -> EvalReport:
    """Final-step predictions of ``model`` over ``instances``, as a report."""
    preds, labels, masks = [], [], []
    for inst in instances:
        out = model.forward(Tape(), model.prepare(inst), inference=inference)
        preds.append(out[-1].data[:, 0])
        labels.append(inst.labels.finite_hops())
        masks.append(inst.mask)
    return id_oor_report(preds, labels, masks, train_cap)


# --------------------------------------------------------------------------
# report files
# --------------------------------------------------------------------------

def write_report_json(path, report: EvalReport) -> None:
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def read_report_json(path) -> EvalReport:
    with open(path) as f:
        return EvalReport.from_dict(json.load(f))


def write_report_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["distance", "mae", "count"])
        for d in sorted(report.per_distance):
            mae, count = report.per_distance[d]
            w.writerow([d, repr(mae), count])


ABLATION_COLUMNS = ["model_variant", "test_mae", "id_mae", "oor_mae", "max_pred"]


def write_ablation_csv(path, rows: list[dict]) -> None:
    """One summary row per trained variant; absent OOR cells stay empty."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ABLATION_COLUMNS)
        for row in rows:
            w.writerow([row["model_variant"]] +
                       ["" if row.get(k) is None else repr(row[k])
                        for k in ABLATION_COLUMNS[1:]])
