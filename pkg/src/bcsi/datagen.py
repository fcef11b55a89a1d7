"""Biased dataset generation, colored-IDX ingestion and the BFDS file format.

Every sample carries a task label and a hidden bias attribute. The canonical
bias of class ``y`` is ``y`` itself, so a sample is bias-conflicting exactly
when ``bias_attr != label``. Training code only ever sees ``features`` and
``labels``; ``bias_attrs`` exist for evaluation.
"""
from __future__ import annotations

import gzip
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

SPLITS = ("train", "val", "test")

DATASET_MAGIC = b"BFDS"
DATASET_VERSION = 1

# RGB triples in [0, 1]; index = color id = canonical bias of that digit.
PALETTE = np.array(
    [
        [1.0, 0.0, 0.0],  # red
        [0.0, 1.0, 0.0],  # green
        [0.0, 0.0, 1.0],  # blue
        [1.0, 1.0, 0.0],  # yellow
        [1.0, 0.0, 1.0],  # magenta
        [0.0, 1.0, 1.0],  # cyan
        [1.0, 0.5, 0.0],  # orange
        [0.5, 0.0, 0.5],  # purple
        [0.0, 0.5, 0.5],  # teal
        [0.5, 0.5, 0.0],  # olive
    ]
)


class DatasetFormatError(ValueError):
    """Raised for malformed dataset or IDX files."""


class ChecksumError(DatasetFormatError):
    pass


class VersionError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class Sample:
    id: int
    features: np.ndarray
    label: int
    bias_attr: int

    @property
    def is_conflicting(self) -> bool:
        return self.bias_attr != self.label


@dataclass(frozen=True, eq=False)
class BiasedDataset:
    """Column-oriented dataset; arrays are made read-only on construction."""

    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    bias_attrs: np.ndarray
    num_classes: int
    conflict_ratio: float
    split: str = "train"

    def __post_init__(self):
        ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        bias = np.ascontiguousarray(self.bias_attrs, dtype=np.int64)
        if feats.ndim != 2:
            raise ValueError("features must be a 2-D array")
        n = feats.shape[0]
        if not (ids.shape == labels.shape == bias.shape == (n,)):
            raise ValueError("every column array needs one entry per sample")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if n and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("labels out of range")
        if n and (bias.min() < 0 or bias.max() >= self.num_classes):
            raise ValueError("bias_attrs out of range")
        if len(np.unique(ids)) != n:
            raise ValueError("sample ids must be unique")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features must be finite")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        for name, arr in (("ids", ids), ("features", feats), ("labels", labels), ("bias_attrs", bias)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.features.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, BiasedDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.conflict_ratio == other.conflict_ratio
            and self.split == other.split
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.bias_attrs, other.bias_attrs)
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
        )

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def is_conflicting(self) -> np.ndarray:
        return self.bias_attrs != self.labels

    @property
    def samples(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self.sample(i)

    def sample(self, index: int) -> Sample:
        return Sample(
            int(self.ids[index]), self.features[index], int(self.labels[index]), int(self.bias_attrs[index])
        )

    def index_of(self, ids) -> np.ndarray:
        """Row positions of the given sample ids (KeyError on unknown ids)."""
        lookup = {int(s): i for i, s in enumerate(self.ids)}
        try:
            return np.array([lookup[int(s)] for s in ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"unknown sample id {exc.args[0]}") from None

    def subset(self, rows) -> "BiasedDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return BiasedDataset(
            self.ids[rows], self.features[rows], self.labels[rows], self.bias_attrs[rows],
            self.num_classes, self.conflict_ratio, self.split,
        )


@dataclass(frozen=True)
class GenConfig:
    n_per_class: int = 500
    C: int = 5
    d_signal: int = 5
    d_bias: int = 5
    signal_margin: float = 1.0
    bias_margin: float = 3.0
    noise_sigma: float = 1.0
    r: float = 0.05
    seed: int = 0

    @property
    def d(self) -> int:
        return self.d_signal + self.d_bias

    def validate(self) -> None:
        if not 0.0 <= self.r <= 1.0:
            raise ValueError(f"r must lie in [0, 1], got {self.r}")
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        if self.C < 2:
            raise ValueError("C must be >= 2")
        if self.signal_margin <= 0 or self.bias_margin <= 0:
            raise ValueError("margins must be positive")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive")
        if self.d_signal < self.C or self.d_bias < self.C:
            raise ValueError("d_signal and d_bias must each be >= C (one-hot class directions)")
        if self.bias_margin <= self.signal_margin:
            raise ValueError("bias_margin must exceed signal_margin (bias must be easier to learn)")


def _draw_features(cfg: GenConfig, labels: np.ndarray, bias: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = labels.shape[0]
    x = rng.normal(0.0, cfg.noise_sigma, size=(n, cfg.d))
    rows = np.arange(n)
    x[rows, labels] += cfg.signal_margin
    x[rows, cfg.d_signal + bias] += cfg.bias_margin
    return x


def _assemble(cfg: GenConfig, bias_sampler, split: str, r: float, n_per_class: int) -> BiasedDataset:
    rng = np.random.default_rng(cfg.seed)
    labels = np.repeat(np.arange(cfg.C), n_per_class)
    bias = bias_sampler(labels, rng)
    x = _draw_features(cfg, labels, bias, rng)
    return BiasedDataset(np.arange(labels.size), x, labels, bias, cfg.C, r, split)


def _off_class_bias(labels: np.ndarray, r: float, C: int, rng: np.random.Generator) -> np.ndarray:
    flip = rng.random(labels.size) < r
    # uniform over the C-1 other classes
    shift = rng.integers(1, C, size=labels.size)
    return np.where(flip, (labels + shift) % C, labels)


def generate_synthetic(cfg: GenConfig) -> BiasedDataset:
    """Gaussian-blob training set whose bias block agrees with the label w.p. 1 - r."""
    cfg.validate()
    return _assemble(
        cfg, lambda y, rng: _off_class_bias(y, cfg.r, cfg.C, rng), "train", cfg.r, cfg.n_per_class
    )


def generate_unbiased_test(cfg: GenConfig, n_per_class: int | None = None) -> BiasedDataset:
    """Same generator with the bias attribute uniform over all classes."""
    cfg.validate()
    n = cfg.n_per_class if n_per_class is None else n_per_class
    if n < 1:
        raise ValueError("n_per_class must be >= 1")
    r = (cfg.C - 1) / cfg.C
    return _assemble(cfg, lambda y, rng: rng.integers(0, cfg.C, size=y.size), "test", r, n)


# --- IDX ingestion -----------------------------------------------------------

_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path, expected_magic: int) -> np.ndarray:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DatasetFormatError(f"{path}: file too short for IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DatasetFormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    dtype = _IDX_DTYPES.get((magic >> 8) & 0xFF)
    if dtype is None:
        raise DatasetFormatError(f"{path}: unsupported IDX element type")
    header = 4 + 4 * ndim
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(shape))
    body = np.frombuffer(raw, dtype=dtype, offset=header)
    if body.size != count:
        raise DatasetFormatError(f"{path}: expected {count} elements, found {body.size}")
    return body.reshape(shape)


def colorize(images: np.ndarray, colors: np.ndarray) -> np.ndarray:
    """Scale grayscale images (N, H, W) in [0, 1] per channel by RGB colors (N, 3)."""
    return images[:, None, :, :] * colors[:, :, None, None]


def load_idx_with_color_bias(images_path, labels_path, r: float, seed: int, split: str = "train") -> BiasedDataset:
    """Colored-digit dataset: color index equals the label w.p. 1 - r.

    Features are the 3-channel image (channel-major) flattened, values in [0, 1].
    ``r`` may be passed as ``(C - 1) / C`` = 0.9 to get an unbiased test split.
    """
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"r must lie in [0, 1], got {r}")
    images = read_idx(images_path, 0x00000803)
    labels = read_idx(labels_path, 0x00000801).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise DatasetFormatError(
            f"image count {images.shape[0]} does not match label count {labels.shape[0]}"
        )
    C = len(PALETTE)
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise DatasetFormatError("IDX labels must lie in [0, 10)")
    rng = np.random.default_rng(seed)
    bias = _off_class_bias(labels, r, C, rng)
    gray = images.astype(np.float64) / 255.0
    feats = colorize(gray, PALETTE[bias]).reshape(labels.size, -1)
    return BiasedDataset(np.arange(labels.size), feats, labels, bias, C, r, split)


# --- BFDS file format --------------------------------------------------------
# little-endian: "BFDS" | u8 version | u32 C | u32 d | f64 r | u8 split | u64 n
# then n x (u64 id | u16 label | u16 bias_attr | d x f64) | u32 CRC32 of all preceding bytes

_HEADER = struct.Struct("<4sBIIdBQ")


def dataset_to_bytes(ds: BiasedDataset) -> bytes:
    n, d = ds.features.shape
    head = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, ds.num_classes, d, ds.conflict_ratio, SPLITS.index(ds.split), n)
    rec = np.dtype([("id", "<u8"), ("label", "<u2"), ("bias", "<u2"), ("x", "<f8", (d,))])
    body = np.empty(n, dtype=rec)
    body["id"] = ds.ids
    body["label"] = ds.labels
    body["bias"] = ds.bias_attrs
    body["x"] = ds.features
    payload = head + body.tobytes()
    return payload + struct.pack("<I", zlib.crc32(payload))


def dataset_from_bytes(raw: bytes) -> BiasedDataset:
    if len(raw) < _HEADER.size + 4:
        raise ChecksumError("dataset file truncated")
    magic, version = raw[:4], raw[4]
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"bad dataset magic {magic!r}")
    if version != DATASET_VERSION:
        raise VersionError(f"unsupported dataset version {version}")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise ChecksumError("dataset checksum mismatch (file corrupt or truncated)")
    _, _, C, d, r, split, n = _HEADER.unpack_from(raw)
    if split >= len(SPLITS):
        raise DatasetFormatError(f"unknown split index {split}")
    rec = np.dtype([("id", "<u8"), ("label", "<u2"), ("bias", "<u2"), ("x", "<f8", (d,))])
    if len(raw) - 4 - _HEADER.size != n * rec.itemsize:
        raise DatasetFormatError("dataset body length disagrees with header")
    body = np.frombuffer(raw, dtype=rec, count=n, offset=_HEADER.size)
    return BiasedDataset(
        body["id"].astype(np.int64), body["x"].reshape(n, d), body["label"].astype(np.int64),
        body["bias"].astype(np.int64), C, r, SPLITS[split],
    )


def save_dataset(ds: BiasedDataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> BiasedDataset:
    return dataset_from_bytes(Path(path).read_bytes())
