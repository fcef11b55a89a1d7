"""Counterweight fine-tuning of a biased model on a pivotal set."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from bcsi.datagen import BiasedDataset
from bcsi.nn import Adam, MlpParams, NumericalError, _from_arrays, _init_layer, backward
from bcsi.selection import PivotalSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FineTuneConfig:
    lam: float = 0.1
    n_iter: int = 100
    lr: float = 1e-3
    lr_final_factor: float = 1e-3
    weight_decay: float = 1e-4
    reinit_last_layer: bool = True
    seed: int = 0
    pivotal_chunk: int = 4096

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.n_iter < 1:
            raise ValueError("n_iter must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.pivotal_chunk < 1:
            raise ValueError("pivotal_chunk must be >= 1")


def cosine_lr(step: int, n_iter: int, lr: float, final_factor: float = 1e-3) -> float:
    """Cosine annealing from ``lr`` at step 0 to ``lr * final_factor`` at step ``n_iter - 1``."""
    if n_iter <= 1:
        return lr
    lo = lr * final_factor
    return lo + 0.5 * (lr - lo) * (1.0 + math.cos(math.pi * step / (n_iter - 1)))


def reinit_last_layer(params: MlpParams, seed: int) -> MlpParams:
    rng = np.random.default_rng(seed)
    w, b = _init_layer(rng, params.hidden_dim, params.num_classes)
    return MlpParams(params.weights[:-1] + (w,), params.biases[:-1] + (b,))


def _mean_ce_grads(params, x, y, chunk):
    """Mean CE and its gradient, accumulated over fixed-size chunks of the batch."""
    n = y.size
    total, grads = 0.0, None
    for start in range(0, n, chunk):
        xs, ys = x[start:start + chunk], y[start:start + chunk]
        loss, g = backward(params, xs, ys, "ce", weights=np.full(ys.size, 1.0 / n))
        total += loss
        grads = g if grads is None else [a + b for a, b in zip(grads, g)]
    return total, grads


def finetune(params: MlpParams, ds: BiasedDataset, pivotal: PivotalSet | list, cfg: FineTuneConfig = FineTuneConfig()):
    """Fine-tune all parameters on ``CE(Z_P) + lam * CE(Z_S)``.

    ``Z_S`` holds ``|Z_P|`` samples drawn uniformly with replacement from the
    rest of the training set, redrawn each iteration. Returns the fine-tuned
    parameters and a per-iteration trace of dicts.
    """
    cfg.validate()
    ids = pivotal.intersection if isinstance(pivotal, PivotalSet) else list(pivotal)
    if len(ids) == 0:
        raise ValueError("pivotal set is empty")
    p_rows = ds.index_of(ids)
    mask = np.ones(len(ds), dtype=bool)
    mask[p_rows] = False
    r_rows = np.flatnonzero(mask)
    if r_rows.size == 0:
        log.warning("pivotal set covers the whole dataset; counterweight term is zero")

    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    if cfg.reinit_last_layer:
        params = reinit_last_layer(params, int(seeds[0].generate_state(1)[0]))
    rng = np.random.default_rng(seeds[1])

    arrays = [a.copy() for a in params.arrays()]
    opt = Adam(arrays)
    xp, yp = ds.features[p_rows], ds.labels[p_rows]
    n_p = p_rows.size
    trace = []
    for it in range(cfg.n_iter):
        lr = cosine_lr(it, cfg.n_iter, cfg.lr, cfg.lr_final_factor)
        current = _from_arrays(arrays)
        loss_p, grads = _mean_ce_grads(current, xp, yp, cfg.pivotal_chunk)
        loss_r = 0.0
        if r_rows.size:
            draw = r_rows[rng.integers(0, r_rows.size, size=n_p)]
            loss_r, g_r = _mean_ce_grads(current, ds.features[draw], ds.labels[draw], cfg.pivotal_chunk)
            grads = [a + cfg.lam * b for a, b in zip(grads, g_r)]
        total = loss_p + cfg.lam * loss_r
        if not np.isfinite(total):
            raise NumericalError(f"non-finite fine-tuning loss at iteration {it}")
        trace.append({"iter": it, "lr": lr, "loss_pivotal": loss_p, "loss_remain": loss_r, "loss_total": total})
        opt.step(arrays, grads, lr)
        if cfg.weight_decay:
            for a in arrays:
                a *= 1.0 - lr * cfg.weight_decay
    return _from_arrays(arrays), trace


TRACE_FIELDS = ("iter", "lr", "loss_pivotal", "loss_remain", "loss_total")


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for row in trace:
            w.writerow([row["iter"]] + [f"{row[k]:.17g}" for k in TRACE_FIELDS[1:]])
