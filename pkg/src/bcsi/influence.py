"""Last-layer influence scores.

The last layer of the network is a linear map followed by softmax, so the
Hessian of the mean loss with respect to ``(W, b)`` is exactly

    H = 1/N sum_n A_n kron [h_n; 1][h_n; 1]^T  (+ damping * I)

with ``A_n = diag(p_n) - p_n p_n^T`` for cross-entropy. Everything below works
in the flattened layout ``[vec(W), b]`` used by ``nn.last_layer_grads``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg

from bcsi.datagen import BiasedDataset, Sample
from bcsi.nn import (
    MlpParams, NumericalError, TrainConfig, forward, init_mlp, last_layer_grads, softmax_ce, train,
)

log = logging.getLogger(__name__)

METHODS = ("Loss", "GradNorm", "SelfInfluence", "BCSI", "IFTrain")

RELATIVE_DAMPING = 1e-3
DENSE_MAX = 2000
SCORE_CHUNK = 4096  # rows per batch of per-sample gradients


class SolveError(NumericalError):
    pass


@dataclass(frozen=True, eq=False)
class LastLayerHessian:
    matrix: np.ndarray
    damping: float
    n_samples: int
    loss_kind: str = "ce"

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @cached_property
    def cholesky(self):
        try:
            return scipy.linalg.cho_factor(self.matrix, lower=True, check_finite=True)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SolveError(
                f"Cholesky factorization failed (damping={self.damping:g}); increase damping"
            ) from exc


def _logit_curvature(probs: np.ndarray, labels: np.ndarray, loss_kind: str, q: float) -> np.ndarray:
    """Per-sample Hessian of the loss w.r.t. the logits, shape (N, C, C)."""
    a = np.einsum("ni,ij->nij", probs, np.eye(probs.shape[1])) - probs[:, :, None] * probs[:, None, :]
    if loss_kind == "ce":
        return a
    if loss_kind == "gce":
        n = labels.size
        py = probs[np.arange(n), labels]
        delta = probs.copy()
        delta[np.arange(n), labels] -= 1.0
        return (py**q)[:, None, None] * (a - q * delta[:, :, None] * delta[:, None, :])
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def _layout_permutation(h_dim: int, C: int) -> np.ndarray:
    """Map ``[vec(W), b]`` positions to the class-major augmented layout ``[W_i, b_i]_i``."""
    perm = np.empty((h_dim + 1) * C, dtype=np.int64)
    for i in range(C):
        perm[i * h_dim:(i + 1) * h_dim] = i * (h_dim + 1) + np.arange(h_dim)
        perm[C * h_dim + i] = i * (h_dim + 1) + h_dim
    return perm


def assemble_hessian(
    params: MlpParams,
    ds: BiasedDataset,
    loss_kind: str = "ce",
    damping: float | None = None,
    q: float = 0.7,
) -> LastLayerHessian:
    """Exact last-layer Hessian of the mean loss plus ``damping * I``.

    ``damping=None`` uses ``1e-3 * trace / P`` of the undamped matrix. An empty
    dataset yields the pure damping matrix.
    """
    if damping is not None and damping < 0:
        raise ValueError("damping must be nonnegative")
    C, h_dim = params.num_classes, params.hidden_dim
    P = (h_dim + 1) * C
    n = len(ds)
    aug = np.zeros((C, h_dim + 1, C, h_dim + 1))
    if n:
        logits, h = forward(params, ds.features, return_hidden=True)
        if not (np.all(np.isfinite(h)) and np.all(np.isfinite(logits))):
            raise NumericalError("non-finite activations while assembling the Hessian")
        probs, _ = softmax_ce(logits, ds.labels)
        curv = _logit_curvature(probs, ds.labels, loss_kind, q)
        ht = np.hstack([h, np.ones((n, 1))])
        for i in range(C):
            for j in range(i, C):
                block = (ht * curv[:, i, j, None]).T @ ht / n
                aug[i, :, j, :] = block
                aug[j, :, i, :] = block.T
    m = aug.reshape(P, P)
    m = 0.5 * (m + m.T)
    perm = _layout_permutation(h_dim, C)
    m = m[np.ix_(perm, perm)]
    if damping is None:
        damping = RELATIVE_DAMPING * float(np.trace(m)) / P
    m[np.diag_indices(P)] += damping
    return LastLayerHessian(m, float(damping), n, loss_kind)


def conjugate_gradient(a: np.ndarray, b: np.ndarray, rtol: float = 1e-10, max_iter: int | None = None) -> np.ndarray:
    """Plain CG for a symmetric positive definite ``a`` and a single right-hand side."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = r @ r
    stop = (rtol * np.linalg.norm(b)) ** 2
    for _ in range(max_iter or 10 * b.size):
        if rs <= stop:
            break
        ap = a @ p
        curv = p @ ap
        if curv <= 0:
            raise SolveError("matrix not positive definite in CG; increase damping")
        alpha = rs / curv
        x += alpha * p
        r -= alpha * ap
        rs_new = r @ r
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def _relative_residual(a, x, g) -> np.ndarray:
    num = np.linalg.norm(a @ x - g, axis=0)
    den = np.linalg.norm(g, axis=0)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), num)


def solve(H: LastLayerHessian, g: np.ndarray, rtol: float = 1e-8, dense_max: int = DENSE_MAX) -> np.ndarray:
    """``H^{-1} g`` for a vector or a (P, k) matrix of right-hand sides.

    Dense Cholesky up to ``dense_max`` parameters, conjugate gradient beyond.
    Raises ``SolveError`` if the relative residual exceeds ``rtol``.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.shape[0] != H.size:
        raise ValueError(f"right-hand side length {g.shape[0]} does not match Hessian size {H.size}")
    a = H.matrix
    if H.size <= dense_max:
        x = scipy.linalg.cho_solve(H.cholesky, g)
        res = _relative_residual(a, x, g)
        if np.any(res > rtol):
            # one step of iterative refinement
            x = x + scipy.linalg.cho_solve(H.cholesky, g - a @ x)
    else:
        cols = g.reshape(H.size, -1)
        x = np.column_stack([conjugate_gradient(a, c, rtol=rtol * 1e-2) for c in cols.T]).reshape(g.shape)
    res = _relative_residual(a, x, g)
    if np.any(res > rtol):
        raise SolveError(f"relative residual {np.max(res):.3g} exceeds {rtol:g}; increase damping")
    return x


def _xy(z):
    if isinstance(z, Sample):
        return z.features, z.label
    return z


def _grad(params, z, loss_kind, q):
    x, y = _xy(z)
    return last_layer_grads(params, np.asarray(x)[None], [y], loss_kind, q)[0]


def _check(H: LastLayerHessian, params: MlpParams):
    if H.size != params.last_layer_size:
        raise ValueError(f"Hessian size {H.size} does not match last layer size {params.last_layer_size}")


def self_influence(params: MlpParams, H: LastLayerHessian, sample, loss_kind: str = "ce", q: float = 0.7) -> float:
    """``g^T H^{-1} g`` for one sample (a ``Sample`` or ``(features, label)``)."""
    _check(H, params)
    g = _grad(params, sample, loss_kind, q)
    return float(g @ solve(H, g))


def cross_influence(params: MlpParams, H: LastLayerHessian, z, z_prime, loss_kind: str = "ce", q: float = 0.7) -> float:
    _check(H, params)
    g = _grad(params, z, loss_kind, q)
    g_prime = _grad(params, z_prime, loss_kind, q)
    return float(g_prime @ solve(H, g))


def if_train(params: MlpParams, H: LastLayerHessian, z, ds: BiasedDataset, loss_kind: str = "ce", q: float = 0.7) -> float:
    """Mean influence of ``z`` over the training set, via one solve against the mean gradient."""
    _check(H, params)
    if len(ds) == 0:
        raise ValueError("empty dataset")
    gbar = sum(g.sum(axis=0) for g in _grad_chunks(params, ds, loss_kind, q, SCORE_CHUNK)) / len(ds)
    return float(_grad(params, z, loss_kind, q) @ solve(H, gbar))


def _grad_chunks(params, ds, loss_kind, q, chunk):
    for start in range(0, len(ds), chunk):
        rows = slice(start, start + chunk)
        yield last_layer_grads(params, ds.features[rows], ds.labels[rows], loss_kind, q)


def self_influence_all(
    params: MlpParams, H: LastLayerHessian, ds: BiasedDataset, loss_kind: str = "ce", q: float = 0.7,
    chunk: int = SCORE_CHUNK,
) -> np.ndarray:
    """Self-influence of every row, solving ``chunk`` right-hand sides at a time to bound memory."""
    _check(H, params)
    out = [np.einsum("np,pn->n", g, solve(H, g.T)) for g in _grad_chunks(params, ds, loss_kind, q, chunk)]
    return np.concatenate(out) if out else np.zeros(0)


def if_train_all(
    params: MlpParams, H: LastLayerHessian, ds: BiasedDataset, loss_kind: str = "ce", q: float = 0.7,
    chunk: int = SCORE_CHUNK,
) -> np.ndarray:
    _check(H, params)
    if len(ds) == 0:
        return np.zeros(0)
    gsum = sum(g.sum(axis=0) for g in _grad_chunks(params, ds, loss_kind, q, chunk))
    v = solve(H, gsum / len(ds))
    return np.concatenate([g @ v for g in _grad_chunks(params, ds, loss_kind, q, chunk)])


# --- records -----------------------------------------------------------------


@dataclass(frozen=True)
class InfluenceRecord:
    sample_id: int
    score: float
    method: str
    run_seed: int = 0
    epoch_t: int = 0


def make_records(ds: BiasedDataset, scores: np.ndarray, method: str, run_seed: int = 0, epoch_t: int = 0) -> list[InfluenceRecord]:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise NumericalError(f"non-finite {method} scores")
    return [
        InfluenceRecord(int(i), float(s), method, int(run_seed), int(epoch_t))
        for i, s in zip(ds.ids, scores)
    ]


def scores_by_id(records, ds: BiasedDataset) -> np.ndarray:
    """Align record scores with the dataset's row order (KeyError if any id lacks a score)."""
    lookup = {r.sample_id: r.score for r in records}
    missing = [int(i) for i in ds.ids if int(i) not in lookup]
    if missing:
        raise KeyError(f"{len(missing)} samples have no score (first id {missing[0]})")
    return np.array([lookup[int(i)] for i in ds.ids])


def loss_scores(params: MlpParams, ds: BiasedDataset, run_seed: int = 0, epoch_t: int = 0) -> list[InfluenceRecord]:
    _, loss = softmax_ce(forward(params, ds.features), ds.labels)
    return make_records(ds, loss, "Loss", run_seed, epoch_t)


def gradnorm_scores(params: MlpParams, ds: BiasedDataset, run_seed: int = 0, epoch_t: int = 0) -> list[InfluenceRecord]:
    return make_records(ds, _grad_norms(params, ds), "GradNorm", run_seed, epoch_t)


def _grad_norms(params: MlpParams, ds: BiasedDataset) -> np.ndarray:
    out = [np.linalg.norm(g, axis=1) for g in _grad_chunks(params, ds, "ce", 0.7, SCORE_CHUNK)]
    return np.concatenate(out) if out else np.zeros(0)


@dataclass(frozen=True)
class ScoreConfig:
    """Training recipe for the model that scores are computed on.

    Influence quantities always use cross-entropy gradients and Hessian at the
    trained parameters; ``loss`` only shapes the model.
    """

    loss: str = "gce"
    epochs: int = 5
    q: float = 0.7
    lr: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 0.0
    damping: float | None = None
    seed: int = 0

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            loss=self.loss, q=self.q, epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
            seed=self.seed, weight_decay=self.weight_decay,
        )


BCSI_DEFAULTS = ScoreConfig(loss="gce", epochs=5)
SI_DEFAULTS = ScoreConfig(loss="ce", epochs=100)


def fit_scoring_model(ds: BiasedDataset, dims, cfg: ScoreConfig, snapshot_epochs=()):
    params = init_mlp(dims, cfg.seed)
    return train(params, ds, cfg.train_config(), snapshot_epochs=snapshot_epochs)


def influence_scores(params: MlpParams, ds: BiasedDataset, method: str, damping: float | None = None) -> np.ndarray:
    """Raw per-sample scores of one trained model, in dataset row order."""
    if method == "Loss":
        return softmax_ce(forward(params, ds.features), ds.labels)[1]
    if method == "GradNorm":
        return _grad_norms(params, ds)
    H = assemble_hessian(params, ds, "ce", damping)
    if method in ("SelfInfluence", "BCSI"):
        return self_influence_all(params, H, ds)
    if method == "IFTrain":
        return if_train_all(params, H, ds)
    raise ValueError(f"unknown method {method!r}")


def bcsi_scores(ds: BiasedDataset, dims, cfg: ScoreConfig = BCSI_DEFAULTS) -> list[InfluenceRecord]:
    """Self-influence of every training sample under a briefly GCE-trained model."""
    if ds.split != "train":
        raise ValueError("BCSI is computed on a train split")
    params, _ = fit_scoring_model(ds, dims, cfg)
    scores = influence_scores(params, ds, "BCSI", cfg.damping)
    return make_records(ds, scores, "BCSI", cfg.seed, cfg.epochs)


def si_scores(ds: BiasedDataset, dims, cfg: ScoreConfig = SI_DEFAULTS) -> list[InfluenceRecord]:
    """Self-influence under a cross-entropy model trained to (near) convergence."""
    if ds.split != "train":
        raise ValueError("self-influence is computed on a train split")
    params, _ = fit_scoring_model(ds, dims, cfg)
    scores = influence_scores(params, ds, "SelfInfluence", cfg.damping)
    return make_records(ds, scores, "SelfInfluence", cfg.seed, cfg.epochs)


# --- CSV dump ----------------------------------------------------------------

SCORE_FIELDS = ("sample_id", "method", "epoch_t", "run_seed", "score")


def write_scores(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_FIELDS)
        for r in records:
            w.writerow([r.sample_id, r.method, r.epoch_t, r.run_seed, f"{r.score:.17g}"])


def read_scores(path) -> list[InfluenceRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SCORE_FIELDS:
            raise ValueError(f"{path}: unexpected score CSV header {reader.fieldnames}")
        return [
            InfluenceRecord(int(row["sample_id"]), float(row["score"]), row["method"], int(row["run_seed"]), int(row["epoch_t"]))
            for row in reader
        ]
