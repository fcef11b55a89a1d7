"""Feedforward ReLU classifier in plain numpy.

Training is deterministic given the initial parameters, the dataset and the
``TrainConfig``. Last-layer gradients are flattened as ``[vec(dW), db]`` with
``dW`` of shape ``(C, h)`` in row-major order.
"""
from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from bcsi.datagen import BiasedDataset

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"BFMP"
CHECKPOINT_VERSION = 1

LOSSES = ("ce", "gce")


class NumericalError(RuntimeError):
    """Non-finite loss or activations during optimization."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MlpParams:
    weights: tuple  # each (out, in)
    biases: tuple  # each (out,)

    def __post_init__(self):
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise ValueError("need at least one layer and one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match weight shape {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input dim {w.shape[1]} does not chain")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden_dim(self) -> int:
        """Width of the input to the last layer."""
        return self.weights[-1].shape[1]

    @property
    def last_layer_size(self) -> int:
        return (self.hidden_dim + 1) * self.num_classes

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, MlpParams):
            return NotImplemented
        a, b = self.arrays(), other.arrays()
        return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def _from_arrays(arrays: Sequence[np.ndarray]) -> MlpParams:
    return MlpParams(tuple(arrays[0::2]), tuple(arrays[1::2]))


def _init_layer(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)


def init_mlp(dims: Sequence[int], seed: int) -> MlpParams:
    """He-uniform weights in +-sqrt(6 / fan_in), zero biases."""
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError("dims must list at least an input and an output width")
    if any(d < 1 for d in dims):
        raise ValueError(f"all dims must be >= 1, got {dims}")
    rng = np.random.default_rng(seed)
    layers = [_init_layer(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
    return MlpParams(tuple(w for w, _ in layers), tuple(b for _, b in layers))


def forward(params: MlpParams, features: np.ndarray, return_hidden: bool = False):
    """Logits for one sample (1-D input) or a batch (2-D input).

    With ``return_hidden`` also returns the penultimate activations, i.e. the
    input of the last layer.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != params.dims[0]:
        raise ValueError(f"feature dim {x.shape[-1]} does not match network input {params.dims[0]}")
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.maximum(h @ w.T + b, 0.0)
    logits = h @ params.weights[-1].T + params.biases[-1]
    return (logits, h) if return_hidden else logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_ce(logits, y):
    """Stable softmax and cross-entropy ``-log p_y``; vectorized over a leading batch axis."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y)
    C = logits.shape[-1]
    if np.any(y < 0) or np.any(y >= C):
        raise ValueError(f"label out of range [0, {C})")
    z = logits - np.max(logits, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1))
    probs = np.exp(z - lse[..., None])
    zy = np.take_along_axis(z, np.asarray(y)[..., None], axis=-1)[..., 0] if z.ndim > 1 else z[int(y)]
    return probs, lse - zy


def gce(probs, y, q: float = 0.7):
    """Generalized cross-entropy ``(1 - p_y^q) / q``."""
    if not q > 0:
        raise ValueError(f"q must be positive, got {q}")
    probs = np.asarray(probs, dtype=np.float64)
    py = np.take_along_axis(probs, np.asarray(y)[..., None], axis=-1)[..., 0] if probs.ndim > 1 else probs[int(y)]
    return (1.0 - py**q) / q


def _loss_and_logit_grad(logits: np.ndarray, y: np.ndarray, loss: str, q: float):
    """Per-sample loss and d(loss)/d(logits)."""
    probs, ce = softmax_ce(logits, y)
    delta = probs.copy()
    delta[np.arange(y.size), y] -= 1.0
    if loss == "ce":
        return ce, delta
    py = probs[np.arange(y.size), y]
    return (1.0 - py**q) / q, delta * (py**q)[:, None]


def last_layer_grads(params: MlpParams, features: np.ndarray, labels: np.ndarray, loss_kind: str = "ce", q: float = 0.7):
    """Per-sample last-layer gradients, shape ``(N, (h+1)*C)``."""
    logits, h = forward(params, np.atleast_2d(features), return_hidden=True)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    _, delta = _loss_and_logit_grad(logits, labels, loss_kind, q)
    n = h.shape[0]
    gw = (delta[:, :, None] * h[:, None, :]).reshape(n, -1)
    return np.concatenate([gw, delta], axis=1)


def last_layer_grad(params: MlpParams, features, label: int, loss_kind: str = "ce", q: float = 0.7) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 1:
        raise ValueError("expected a single feature vector")
    return last_layer_grads(params, features[None], [label], loss_kind, q)[0]


def backward(params: MlpParams, x: np.ndarray, y: np.ndarray, loss: str, q: float = 0.7, weights=None):
    """Weighted sum of per-sample losses and its gradient w.r.t. every parameter.

    ``weights`` defaults to ``1/N`` (mean loss).
    """
    acts = [x]
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.maximum(h @ w.T + b, 0.0)
        acts.append(h)
    logits = h @ params.weights[-1].T + params.biases[-1]
    per, delta = _loss_and_logit_grad(logits, y, loss, q)
    wts = np.full(y.size, 1.0 / y.size) if weights is None else weights
    total = float(per @ wts)
    delta = delta * wts[:, None]
    grads = []
    for i in range(len(params.weights) - 1, -1, -1):
        grads.append(delta.sum(axis=0))
        grads.append(delta.T @ acts[i])
        if i:
            delta = (delta @ params.weights[i]) * (acts[i] > 0)
    grads.reverse()  # [W0, b0, W1, b1, ...]
    return total, grads


class Adam:
    def __init__(self, arrays, beta1=0.9, beta2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            a -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, arrays):
        pass

    def step(self, arrays, grads, lr):
        for a, g in zip(arrays, grads):
            a -= lr * g


def make_optimizer(name: str, arrays, betas=(0.9, 0.999), eps=1e-8):
    if name == "adam":
        return Adam(arrays, betas[0], betas[1], eps)
    if name == "sgd":
        return SGD(arrays)
    raise ValueError(f"unknown optimizer {name!r}")


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "ce"
    q: float = 0.7
    epochs: int = 5
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    weight_decay: float = 0.0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    def validate(self) -> None:
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.loss == "gce" and not 0 < self.q <= 1:
            raise ValueError("GCE q must lie in (0, 1]")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    aligned_acc: list = field(default_factory=list)
    conflicting_acc: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)  # epoch -> MlpParams


def _group_accs(params: MlpParams, ds: BiasedDataset) -> tuple[float, float]:
    correct = predict(params, ds.features) == ds.labels
    conf = ds.is_conflicting
    al = float(correct[~conf].mean()) if (~conf).any() else float("nan")
    cf = float(correct[conf].mean()) if conf.any() else float("nan")
    return al, cf


def train(params: MlpParams, ds: BiasedDataset, cfg: TrainConfig, snapshot_epochs: Sequence[int] = ()):
    """Mini-batch training with a freshly seeded shuffle each epoch.

    Returns the trained parameters and a ``TrainHistory``. ``snapshot_epochs``
    stores copies of the parameters after those epochs in ``history.snapshots``.
    """
    cfg.validate()
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    if ds.feature_dim != params.dims[0]:
        raise ValueError(f"dataset dim {ds.feature_dim} does not match network input {params.dims[0]}")
    arrays = [a.copy() for a in params.arrays()]
    opt = make_optimizer(cfg.optimizer, arrays, (cfg.beta1, cfg.beta2), cfg.eps_adam)
    rng = np.random.default_rng(cfg.seed)
    x, y = ds.features, ds.labels
    n = len(ds)
    hist = TrainHistory()
    wanted = set(snapshot_epochs)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            current = _from_arrays(arrays)
            loss, grads = backward(current, x[idx], y[idx], cfg.loss, cfg.q)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss {loss} at epoch {epoch}, batch offset {start}")
            opt.step(arrays, grads, cfg.lr)
            if cfg.weight_decay:
                for a in arrays:
                    a *= 1.0 - cfg.lr * cfg.weight_decay
            losses.append(loss * idx.size)
        current = _from_arrays([a.copy() for a in arrays])
        hist.loss.append(float(np.sum(losses) / n))
        al, cf = _group_accs(current, ds)
        hist.aligned_acc.append(al)
        hist.conflicting_acc.append(cf)
        if epoch in wanted:
            hist.snapshots[epoch] = current
        log.debug("epoch %d loss %.4f aligned %.3f conflicting %.3f", epoch, hist.loss[-1], al, cf)
    return _from_arrays(arrays), hist


def predict(params: MlpParams, features: np.ndarray) -> np.ndarray:
    # np.argmax returns the lowest index among ties
    return np.argmax(forward(params, np.atleast_2d(features)), axis=1)


def accuracy(params: MlpParams, ds: BiasedDataset, group: str = "all"):
    """Argmax accuracy on all samples, the aligned or conflicting subset, or per (label, bias) cell."""
    correct = predict(params, ds.features) == ds.labels
    if group == "per_group":
        out = {}
        for key in sorted(set(zip(ds.labels.tolist(), ds.bias_attrs.tolist()))):
            mask = (ds.labels == key[0]) & (ds.bias_attrs == key[1])
            out[key] = float(correct[mask].mean())
        if not out:
            raise ValueError("empty dataset")
        return out
    if group == "all":
        mask = np.ones(len(ds), dtype=bool)
    elif group == "aligned":
        mask = ~ds.is_conflicting
    elif group == "conflicting":
        mask = ds.is_conflicting
    else:
        raise ValueError(f"unknown group {group!r}")
    if not mask.any():
        raise ValueError(f"group {group!r} is empty")
    return float(correct[mask].mean())


# --- BFMP checkpoint format --------------------------------------------------
# little-endian: "BFMP" | u8 version | u32 L+1 | (L+1) x u32 dims
# then per layer: W (out x in, row-major f64), b (out f64) | u32 CRC32 of all preceding bytes


def params_to_bytes(params: MlpParams) -> bytes:
    dims = params.dims
    head = struct.pack(f"<4sBI{len(dims)}I", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(dims), *dims)
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays())
    payload = head + body
    return payload + struct.pack("<I", zlib.crc32(payload))


def params_from_bytes(raw: bytes) -> MlpParams:
    if len(raw) < 13:
        raise CheckpointError("checkpoint truncated")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {raw[:4]!r}")
    if raw[4] != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {raw[4]}")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    (ndims,) = struct.unpack_from("<I", raw, 5)
    dims = struct.unpack_from(f"<{ndims}I", raw, 9)
    off = 9 + 4 * ndims
    arrays = []
    for a, b in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(raw, "<f8", a * b, off).reshape(b, a).astype(np.float64)
        off += 8 * a * b
        bias = np.frombuffer(raw, "<f8", b, off).astype(np.float64)
        off += 8 * b
        arrays += [w, bias]
    if off != len(raw) - 4:
        raise CheckpointError("checkpoint body length disagrees with header")
    return _from_arrays(arrays)


def save_params(params: MlpParams, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> MlpParams:
    return params_from_bytes(Path(path).read_bytes())
