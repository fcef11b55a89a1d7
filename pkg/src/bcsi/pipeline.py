"""End-to-end run: data -> ERM -> BCSI pivotal set -> fine-tuning -> evaluation."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

from bcsi.config import PipelineConfig
from bcsi.datagen import BiasedDataset, generate_synthetic, generate_unbiased_test, load_idx_with_color_bias
from bcsi.evaluation import EvalReport, evaluate_model
from bcsi.finetune import finetune
from bcsi.influence import bcsi_scores
from bcsi.nn import MlpParams, init_mlp, train
from bcsi.selection import PivotalSet, detection_precision, pivotal_from_records

log = logging.getLogger(__name__)


def make_datasets(cfg: PipelineConfig) -> tuple[BiasedDataset, BiasedDataset]:
    d = cfg.data
    if d.source == "idx":
        tr = load_idx_with_color_bias(d.train_images, d.train_labels, d.r, d.seed, "train")
        # color independent of digit: r = 9/10
        te = load_idx_with_color_bias(d.test_images, d.test_labels, 0.9, d.test_seed, "test")
        return tr, te
    gen = d.gen_config()
    test_gen = replace(gen, seed=d.test_seed)
    return generate_synthetic(gen), generate_unbiased_test(test_gen, d.test_n_per_class)


def train_erm(cfg: PipelineConfig, ds: BiasedDataset) -> MlpParams:
    params = init_mlp(cfg.dims(ds.feature_dim), cfg.erm.seed)
    params, _ = train(params, ds, cfg.erm.train_config())
    return params


def score_runs(cfg: PipelineConfig, ds: BiasedDataset, jobs: int = 1) -> list:
    """One list of BCSI records per configured seed."""
    dims = cfg.dims(ds.feature_dim)
    cfgs = [cfg.bcsi.score_config(s) for s in cfg.bcsi.seeds]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(lambda c: bcsi_scores(ds, dims, c), cfgs))
    return [bcsi_scores(ds, dims, c) for c in cfgs]


def build_pivotal_set(cfg: PipelineConfig, ds: BiasedDataset, runs: list) -> PivotalSet:
    return pivotal_from_records(runs, ds, cfg.bcsi.k, cfg.bcsi.seeds)


@dataclass
class PipelineResult:
    train_ds: BiasedDataset
    test_ds: BiasedDataset
    erm: MlpParams
    finetuned: MlpParams
    runs: list
    pivotal: PivotalSet
    trace: list
    erm_report: EvalReport
    finetuned_report: EvalReport

    @property
    def pivotal_precision(self) -> float | None:
        if not self.pivotal.intersection:
            return None
        return detection_precision(self.pivotal.intersection, self.train_ds)


def run_pipeline(cfg: PipelineConfig, jobs: int = 1) -> PipelineResult:
    cfg.validate()
    train_ds, test_ds = make_datasets(cfg)
    erm = train_erm(cfg, train_ds)
    runs = score_runs(cfg, train_ds, jobs)
    pivotal = build_pivotal_set(cfg, train_ds, runs)
    if not pivotal.intersection:
        raise ValueError("pivotal set is empty; nothing to fine-tune on")
    ft, trace = finetune(erm, train_ds, pivotal, cfg.finetune.finetune_config())
    return PipelineResult(
        train_ds, test_ds, erm, ft, runs, pivotal, trace,
        evaluate_model(erm, test_ds), evaluate_model(ft, test_ds),
    )
