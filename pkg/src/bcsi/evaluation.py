"""Accuracy reports, detector comparisons and CSV/JSON artifacts."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from bcsi.datagen import BiasedDataset
from bcsi.influence import BCSI_DEFAULTS, SI_DEFAULTS, ScoreConfig, fit_scoring_model, influence_scores
from bcsi.nn import MlpParams, accuracy
from bcsi.selection import detection_precision

DETECTORS = ("Loss", "GradNorm", "SelfInfluence", "IFTrain", "BCSI")


@dataclass
class EvalReport:
    unbiased_acc: float
    aligned_acc: float | None
    conflicting_acc: float | None
    worst_group_acc: float
    groups: dict  # (label, bias_attr) -> accuracy
    precision: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "meta": self.meta,
            "accuracies": {
                "unbiased": self.unbiased_acc,
                "aligned": self.aligned_acc,
                "conflicting": self.conflicting_acc,
                "worst_group": self.worst_group_acc,
            },
            "groups": [
                {"label": int(k[0]), "bias_attr": int(k[1]), "accuracy": v} for k, v in sorted(self.groups.items())
            ],
            "precision": self.precision,
        }


def evaluate_model(params: MlpParams, test_ds: BiasedDataset, meta: dict | None = None) -> EvalReport:
    if len(test_ds) == 0:
        raise ValueError("empty test set")
    conf = test_ds.is_conflicting
    groups = accuracy(params, test_ds, "per_group")
    return EvalReport(
        unbiased_acc=accuracy(params, test_ds, "all"),
        aligned_acc=accuracy(params, test_ds, "aligned") if (~conf).any() else None,
        conflicting_acc=accuracy(params, test_ds, "conflicting") if conf.any() else None,
        worst_group_acc=min(groups.values()),
        groups=groups,
        meta=dict(meta or {}),
    )


def mean_se(values) -> tuple[float, float]:
    """Mean and standard error of the mean (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def ranking_precision(scores, ds: BiasedDataset) -> float:
    """Precision of the top ``#conflicting`` samples by descending score."""
    return detection_precision(None, ds, "ground_truth_count", scores=scores)


@dataclass(frozen=True)
class DetectorConfig:
    """Recipes for the converged CE model (Loss, GradNorm, SI, IF_train) and the BCSI model."""

    converged: ScoreConfig = SI_DEFAULTS
    bcsi: ScoreConfig = BCSI_DEFAULTS


def compare_detectors(
    ds: BiasedDataset,
    dims,
    cfg: DetectorConfig = DetectorConfig(),
    seeds=(0, 1, 2),
    methods=DETECTORS,
    extra_scorers: dict[str, Callable[[BiasedDataset], np.ndarray]] | None = None,
) -> dict:
    """Detection precision at the ground-truth count per method, averaged over model seeds.

    Returns ``{method: {"mean", "se", "values", "mode"}}``.
    """
    per: dict[str, list] = {m: [] for m in methods}
    for name in extra_scorers or {}:
        per[name] = []
    for seed in seeds:
        ce_methods = [m for m in methods if m != "BCSI"]
        if ce_methods:
            c = replace(cfg.converged, seed=seed)
            params, _ = fit_scoring_model(ds, dims, c)
            for m in ce_methods:
                per[m].append(ranking_precision(influence_scores(params, ds, m, c.damping), ds))
        if "BCSI" in methods:
            b = replace(cfg.bcsi, seed=seed)
            params, _ = fit_scoring_model(ds, dims, b)
            per["BCSI"].append(ranking_precision(influence_scores(params, ds, "BCSI", b.damping), ds))
        for name, fn in (extra_scorers or {}).items():
            per[name].append(ranking_precision(fn(ds), ds))
    out = {}
    for m, vals in per.items():
        mean, se = mean_se(vals)
        out[m] = {"mean": mean, "se": se, "values": vals, "mode": "ground_truth_count"}
    return out


def precision_vs_epoch(
    ds: BiasedDataset, dims, epochs_list, cfg: ScoreConfig = SI_DEFAULTS, seeds=(0, 1, 2), methods=("SelfInfluence", "IFTrain")
) -> list[dict]:
    """SI / IF_train detection precision for models checkpointed at each epoch in ``epochs_list``."""
    epochs_list = [int(e) for e in epochs_list]
    if not epochs_list or min(epochs_list) < 1:
        raise ValueError("epochs_list must hold positive epoch counts")
    vals = {(e, m): [] for e in epochs_list for m in methods}
    for seed in seeds:
        c = replace(cfg, seed=seed, epochs=max(epochs_list))
        _, hist = fit_scoring_model(ds, dims, c, snapshot_epochs=epochs_list)
        for e in epochs_list:
            for m in methods:
                vals[e, m].append(ranking_precision(influence_scores(hist.snapshots[e], ds, m, c.damping), ds))
    rows = []
    for e in epochs_list:
        row = {"epoch": e}
        for m in methods:
            row[m], row[m + "_se"] = mean_se(vals[e, m])
        rows.append(row)
    return rows


def histogram(records, ds: BiasedDataset, bins: int = 20) -> list[dict]:
    """Equal-width bins over [min, max] of the scores, counted separately for aligned and conflicting samples."""
    if not records:
        raise ValueError("no records")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    ids = [r.sample_id for r in records]
    scores = np.array([r.score for r in records])
    conf = ds.is_conflicting[ds.index_of(ids)]
    lo, hi = float(scores.min()), float(scores.max())
    width = (hi - lo) / bins
    if width > 0:
        idx = np.minimum(((scores - lo) / width).astype(np.int64), bins - 1)
    else:
        idx = np.zeros(scores.size, dtype=np.int64)
    rows = []
    for b in range(bins):
        sel = idx == b
        rows.append({
            "bin_lo": lo + b * width,
            "bin_hi": hi if b == bins - 1 else lo + (b + 1) * width,
            "aligned": int(np.sum(sel & ~conf)),
            "conflicting": int(np.sum(sel & conf)),
        })
    return rows


def _fmt(v):
    return f"{v:.17g}" if isinstance(v, float) else v


def write_csv(rows: list[dict], path) -> None:
    if not rows:
        raise ValueError("nothing to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})


def export_histogram(records, ds: BiasedDataset, bins: int = 20, path=None) -> list[dict]:
    rows = histogram(records, ds, bins)
    if path is not None:
        write_csv(rows, path)
    return rows


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def write_report(path, meta: dict, accuracies: dict, groups: dict, precision: dict, sweep: list | None = None) -> dict:
    doc = _clean({"meta": meta, "accuracies": accuracies, "groups": groups, "precision": precision, "sweep": sweep or []})
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return doc


def bias_ratio_sweep(r_list, pipeline_cfg, seeds=None) -> list[dict]:
    """ERM vs fine-tuned unbiased test accuracy for each bias-conflicting ratio in ``r_list``."""
    from bcsi.pipeline import run_pipeline

    seeds = list(pipeline_cfg.eval.seeds if seeds is None else seeds)
    rows = []
    for r in r_list:
        erm, ft, prec, size = [], [], [], []
        for s in seeds:
            res = run_pipeline(pipeline_cfg.with_overrides(r=r, seed=s))
            erm.append(res.erm_report.unbiased_acc)
            ft.append(res.finetuned_report.unbiased_acc)
            if res.pivotal_precision is not None:
                prec.append(res.pivotal_precision)
            size.append(len(res.pivotal.intersection))
        row = {"r": float(r)}
        row["erm_acc"], row["erm_acc_se"] = mean_se(erm)
        row["finetuned_acc"], row["finetuned_acc_se"] = mean_se(ft)
        row["pivotal_precision"], row["pivotal_precision_se"] = mean_se(prec) if prec else (float("nan"), float("nan"))
        row["pivotal_size"] = float(np.mean(size))
        rows.append(row)
    return rows


__all__ = [
    "EvalReport", "evaluate_model", "compare_detectors", "precision_vs_epoch", "histogram", "export_histogram",
    "bias_ratio_sweep", "write_report", "write_csv", "mean_se", "ranking_precision", "DetectorConfig",
]
