"""``bcsi`` command line: staged pipeline with artifacts named ``<stage>.<config-hash>.<ext>``.

Exit codes: 0 success, 1 other failure (e.g. empty pivotal set), 2 missing or unusable artifact, 3 config error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import OrderedDict
from pathlib import Path

from bcsi.config import ConfigError, PipelineConfig, load_config
from bcsi.datagen import DatasetFormatError, load_dataset, save_dataset
from bcsi.evaluation import bias_ratio_sweep, evaluate_model, export_histogram, mean_se, ranking_precision, write_report
from bcsi.finetune import finetune, write_trace
from bcsi.influence import read_scores, scores_by_id, write_scores
from bcsi.nn import CheckpointError, NumericalError, load_params, save_params
from bcsi.pipeline import build_pivotal_set, make_datasets, score_runs, train_erm
from bcsi.selection import detection_precision, load_pivotal, save_pivotal

log = logging.getLogger("bcsi")

HASH_LEN = 12

EXIT_OK, EXIT_FAILURE, EXIT_MISSING, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3, 4

# artifact key -> (stage file prefix, extension, producing command)
ARTIFACTS = {
    "train_ds": ("gen-train", "bfds", "gen"),
    "test_ds": ("gen-test", "bfds", "gen"),
    "erm": ("train", "bfmp", "train"),
    "scores": ("score", "csv", "score"),
    "pivotal": ("pivotal", "json", "pivotal"),
    "finetuned": ("finetune", "bfmp", "finetune"),
    "trace": ("finetune-trace", "csv", "finetune"),
    "report": ("eval", "json", "eval"),
    "histogram": ("eval-histogram", "csv", "eval"),
}


class MissingArtifact(RuntimeError):
    pass


class Artifacts:
    def __init__(self, out: Path, config_hash: str, force: bool = False):
        self.out = Path(out)
        self.hash = config_hash[:HASH_LEN]
        self.force = force

    def path(self, key: str) -> Path:
        stage, ext, _ = ARTIFACTS[key]
        return self.out / f"{stage}.{self.hash}.{ext}"

    def require(self, key: str) -> Path:
        p = self.path(key)
        if p.exists():
            return p
        stage, ext, producer = ARTIFACTS[key]
        others = sorted(self.out.glob(f"{stage}.*.{ext}"), key=lambda q: q.stat().st_mtime)
        if others and self.force:
            log.warning("using %s produced from a different config (--force)", others[-1].name)
            return others[-1]
        if others:
            raise MissingArtifact(
                f"{p.name} not found; {others[-1].name} was produced from a different config hash. "
                f"Re-run `bcsi {producer}` or pass --force"
            )
        raise MissingArtifact(f"missing artifact {p}; run `bcsi {producer}` first")


def _setup_logging() -> None:
    level = os.environ.get("BF_LOG", "info").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )


# --- stages ------------------------------------------------------------------


def cmd_gen(cfg: PipelineConfig, art: Artifacts, jobs: int = 1) -> dict:
    train_ds, test_ds = make_datasets(cfg)
    save_dataset(train_ds, art.path("train_ds"))
    save_dataset(test_ds, art.path("test_ds"))
    log.info("wrote %d train / %d test samples (%d conflicting in train)", len(train_ds), len(test_ds), int(train_ds.is_conflicting.sum()))
    return {}


def cmd_train(cfg: PipelineConfig, art: Artifacts, jobs: int = 1) -> dict:
    ds = load_dataset(art.require("train_ds"))
    save_params(train_erm(cfg, ds), art.path("erm"))
    return {}


def cmd_score(cfg: PipelineConfig, art: Artifacts, jobs: int = 1) -> dict:
    ds = load_dataset(art.require("train_ds"))
    runs = score_runs(cfg, ds, jobs)
    write_scores([r for run in runs for r in run], art.path("scores"))
    return {}


def _runs_from_csv(cfg: PipelineConfig, path) -> list:
    by_seed: dict[int, list] = OrderedDict((int(s), []) for s in cfg.bcsi.seeds)
    for rec in read_scores(path):
        if rec.run_seed in by_seed:
            by_seed[rec.run_seed].append(rec)
    return list(by_seed.values())


def cmd_pivotal(cfg: PipelineConfig, art: Artifacts, jobs: int = 1) -> dict:
    ds = load_dataset(art.require("train_ds"))
    runs = _runs_from_csv(cfg, art.require("scores"))
    pivotal = build_pivotal_set(cfg, ds, runs)
    save_pivotal(pivotal, art.path("pivotal"), ds, {"config_hash": art.hash})
    prec = detection_precision(pivotal.intersection, ds) if pivotal.intersection else None
    return {"pivotal_precision": prec, "pivotal_size": len(pivotal.intersection)}


def cmd_finetune(cfg: PipelineConfig, art: Artifacts, jobs: int = 1) -> dict:
    ds = load_dataset(art.require("train_ds"))
    erm = load_params(art.require("erm"))
    pivotal = load_pivotal(art.require("pivotal"))
    params, trace = finetune(erm, ds, pivotal, cfg.finetune.finetune_config())
    save_params(params, art.path("finetuned"))
    write_trace(trace, art.path("trace"))
    return {}


def cmd_eval(cfg: PipelineConfig, art: Artifacts, jobs: int = 1) -> dict:
    train_ds = load_dataset(art.require("train_ds"))
    test_ds = load_dataset(art.require("test_ds"))
    erm = load_params(art.require("erm"))
    ft = load_params(art.require("finetuned"))
    pivotal = load_pivotal(art.require("pivotal"))
    runs = _runs_from_csv(cfg, art.require("scores"))

    reports = {"erm": evaluate_model(erm, test_ds), "finetuned": evaluate_model(ft, test_ds)}
    run_prec = [ranking_precision(scores_by_id(run, train_ds), train_ds) for run in runs]
    mean, se = mean_se(run_prec)
    pivotal_doc = pivotal.to_json(train_ds)
    precision = {
        "pivotal": {
            "mode": "selected_size",
            "intersection": pivotal_doc["intersection_precision"],
            "per_run": pivotal_doc["per_run_precision"],
            "size": len(pivotal.intersection),
        },
        "bcsi": {"mode": "ground_truth_count", "mean": mean, "se": se, "values": run_prec},
    }
    sweep = bias_ratio_sweep(cfg.eval.r_sweep, cfg) if cfg.eval.r_sweep else []
    meta = {
        "config_hash": art.hash,
        "r": train_ds.conflict_ratio,
        "n_train": len(train_ds),
        "n_test": len(test_ds),
        "bcsi_seeds": list(cfg.bcsi.seeds),
        "eval_seeds": list(cfg.eval.seeds),
        "config": cfg.to_dict(),
    }
    write_report(
        art.path("report"), meta,
        {name: rep.to_json()["accuracies"] for name, rep in reports.items()},
        {name: rep.to_json()["groups"] for name, rep in reports.items()},
        precision, sweep,
    )
    if runs and runs[0]:
        export_histogram(runs[0], train_ds, cfg.eval.bins, art.path("histogram"))
    return {
        "erm_acc": reports["erm"].unbiased_acc,
        "finetuned_acc": reports["finetuned"].unbiased_acc,
        "pivotal_precision": precision["pivotal"]["intersection"],
        "pivotal_size": len(pivotal.intersection),
    }


STAGES = OrderedDict(
    gen=cmd_gen, train=cmd_train, score=cmd_score, pivotal=cmd_pivotal, finetune=cmd_finetune, eval=cmd_eval
)


def cmd_pipeline(cfg: PipelineConfig, art: Artifacts, jobs: int = 1) -> dict:
    summary: dict = {}
    for name, stage in STAGES.items():
        log.info("stage %s", name)
        summary.update(stage(cfg, art, jobs))
    return summary


def format_summary(summary: dict) -> str:
    def num(v):
        return "n/a" if v is None else f"{v:.4f}"

    rows = [
        ("ERM unbiased acc", num(summary.get("erm_acc"))),
        ("fine-tuned unbiased acc", num(summary.get("finetuned_acc"))),
        ("pivotal precision", num(summary.get("pivotal_precision"))),
        ("|Z_P|", str(summary.get("pivotal_size", "n/a"))),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


# --- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--out", help="output directory (overrides config 'out')")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("--jobs", type=int, default=1, help="max parallel BCSI runs")
    common.add_argument("--force", action="store_true", help="accept artifacts from a different config hash")
    parser = argparse.ArgumentParser(prog="bcsi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in [*STAGES, "pipeline", "show-config"]:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        cfg = cfg.with_overrides(seed=args.seed, out=args.out)
        cfg.validate()
        if args.jobs < 1:
            raise ConfigError("--jobs", "must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "show-config":
        print(cfg.to_text(), end="")
        return EXIT_OK

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    art = Artifacts(out, cfg.hash(), args.force)
    (out / f"config.{art.hash}.txt").write_text(cfg.to_text())
    stage = cmd_pipeline if args.command == "pipeline" else STAGES[args.command]
    try:
        summary = stage(cfg, art, args.jobs)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DatasetFormatError, CheckpointError) as exc:
        print(f"error: unusable artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: missing file {exc.filename}", file=sys.stderr)
        return EXIT_MISSING
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    if args.command == "pipeline":
        print(format_summary(summary))
    elif summary:
        print(json.dumps(summary))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
