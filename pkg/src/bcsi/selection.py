"""Pivotal-set construction: per-class top-k by score, intersected across seeded runs."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import reduce

import numpy as np

from bcsi.datagen import BiasedDataset
from bcsi.influence import BCSI_DEFAULTS, ScoreConfig, bcsi_scores, scores_by_id

log = logging.getLogger(__name__)


@dataclass
class PivotalSet:
    per_run_sets: list  # run -> class -> list of ids
    intersection: list  # sorted ids
    k: int
    num_runs: int
    seeds: list = field(default_factory=list)
    method: str = "BCSI"
    warnings: list = field(default_factory=list)

    def run_ids(self, run: int) -> set[int]:
        return {i for ids in self.per_run_sets[run] for i in ids}

    def to_json(self, ds: BiasedDataset | None = None) -> dict:
        doc = {
            "k": self.k,
            "num_runs": self.num_runs,
            "seeds": list(self.seeds),
            "method": self.method,
            "per_run": [[list(map(int, ids)) for ids in run] for run in self.per_run_sets],
            "intersection": list(map(int, self.intersection)),
            "warnings": list(self.warnings),
        }
        if ds is not None:
            doc["per_run_precision"] = [
                detection_precision(sorted(self.run_ids(r)), ds) for r in range(self.num_runs)
            ]
            doc["intersection_precision"] = (
                detection_precision(self.intersection, ds) if self.intersection else None
            )
            doc["precision_mode"] = "selected_size"
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "PivotalSet":
        return cls(
            per_run_sets=[[list(ids) for ids in run] for run in doc["per_run"]],
            intersection=list(doc["intersection"]),
            k=int(doc["k"]),
            num_runs=int(doc["num_runs"]),
            seeds=list(doc.get("seeds", [])),
            method=doc.get("method", "BCSI"),
            warnings=list(doc.get("warnings", [])),
        )


def save_pivotal(pivotal: PivotalSet, path, ds: BiasedDataset | None = None, extra: dict | None = None) -> None:
    doc = pivotal.to_json(ds)
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_pivotal(path) -> PivotalSet:
    with open(path) as fh:
        return PivotalSet.from_json(json.load(fh))


def topk_per_class(records, ds: BiasedDataset, k: int) -> list[list[int]]:
    """Ids of the ``k`` highest-scoring samples of every class; ties go to the lower id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = scores_by_id(records, ds)
    out = []
    for c in range(ds.num_classes):
        rows = np.flatnonzero(ds.labels == c)
        # lexsort: last key is primary -> descending score, then ascending id
        order = np.lexsort((ds.ids[rows], -scores[rows]))
        out.append([int(i) for i in ds.ids[rows[order[:k]]]])
    return out


def intersect_runs(per_run_sets: list, warnings: list | None = None) -> list[int]:
    """Intersection over runs of the union-over-classes id sets.

    An empty intersection over three or more runs falls back to the first two
    runs and records a warning.
    """
    sets = [{i for ids in run for i in ids} for run in per_run_sets]
    inter = reduce(set.intersection, sets)
    if not inter and len(sets) > 2:
        msg = f"empty intersection over {len(sets)} runs; falling back to the first two runs"
        log.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        inter = sets[0] & sets[1]
    if not inter:
        msg = "pivotal set is empty"
        log.warning(msg)
        if warnings is not None:
            warnings.append(msg)
    return sorted(inter)


def pivotal_from_records(runs: list, ds: BiasedDataset, k: int, seeds=(), method: str = "BCSI") -> PivotalSet:
    """Build a pivotal set from one list of score records per run."""
    per_run = [topk_per_class(recs, ds, k) for recs in runs]
    warnings: list = []
    inter = intersect_runs(per_run, warnings)
    return PivotalSet(per_run, inter, k, len(runs), list(seeds), method, warnings)


def build_pivotal(
    ds: BiasedDataset,
    dims,
    cfg: ScoreConfig = BCSI_DEFAULTS,
    k: int = 100,
    num_runs: int = 3,
    seeds=None,
    jobs: int = 1,
) -> PivotalSet:
    """Score ``ds`` with BCSI under ``num_runs`` differently seeded models and intersect their top-k sets."""
    seeds = list(range(num_runs)) if seeds is None else [int(s) for s in seeds]
    if len(seeds) != num_runs:
        raise ValueError(f"expected {num_runs} seeds, got {len(seeds)}")
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"seeds must be distinct, got {seeds}")
    cfgs = [replace(cfg, seed=s) for s in seeds]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(lambda c: bcsi_scores(ds, dims, c), cfgs))
    else:
        runs = [bcsi_scores(ds, dims, c) for c in cfgs]
    return pivotal_from_records(runs, ds, k, seeds)


def detection_precision(selected_ids, ds: BiasedDataset, denominator: str = "selected_size", scores=None) -> float:
    """Fraction of bias-conflicting samples among a selection.

    ``selected_size``: ``selected_ids`` is the selection itself.
    ``ground_truth_count``: ``scores`` (dataset row order) are ranked and the
    top ``#conflicting`` samples are taken; ``selected_ids`` is ignored.
    """
    conflicting = ds.is_conflicting
    if denominator == "selected_size":
        rows = ds.index_of(selected_ids)
        if rows.size == 0:
            raise ValueError("empty selection")
        return float(conflicting[rows].mean())
    if denominator == "ground_truth_count":
        if scores is None:
            raise ValueError("ground_truth_count mode needs scores")
        scores = np.asarray(scores, dtype=np.float64)
        n_true = int(conflicting.sum())
        if scores.size == 0 or n_true == 0:
            raise ValueError("nothing to rank: no samples or no bias-conflicting samples")
        order = np.lexsort((ds.ids, -scores))
        return float(conflicting[order[:n_true]].mean())
    raise ValueError(f"unknown denominator {denominator!r}")
