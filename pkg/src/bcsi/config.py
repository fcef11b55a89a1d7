"""Pipeline configuration and its ``key = value`` file format.

Keys are dotted section paths, one per line::

    # comment
    data.r = 0.01
    model.hidden = 100, 100
    bcsi.seeds = 1, 2, 3
    finetune.lambda = 0.1
    out = runs/toy

Unknown keys and unparsable values raise ``ConfigError`` naming the key.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from bcsi.datagen import GenConfig
from bcsi.finetune import FineTuneConfig
from bcsi.influence import ScoreConfig
from bcsi.nn import TrainConfig


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"  # synthetic | idx
    n_per_class: int = 500
    C: int = 5
    d_signal: int = 5
    d_bias: int = 5
    signal_margin: float = 1.0
    bias_margin: float = 3.0
    noise_sigma: float = 1.0
    r: float = 0.01
    seed: int = 0
    test_n_per_class: int = 200
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""

    def gen_config(self) -> GenConfig:
        return GenConfig(
            self.n_per_class, self.C, self.d_signal, self.d_bias, self.signal_margin, self.bias_margin,
            self.noise_sigma, self.r, self.seed,
        )

    @property
    def test_seed(self) -> int:
        return self.seed + 1_000_003


@dataclass(frozen=True)
class ModelSection:
    hidden: tuple = (100, 100)


@dataclass(frozen=True)
class ErmSection:
    loss: str = "ce"
    q: float = 0.7
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 1e-4
    optimizer: str = "adam"
    seed: int = 0

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            loss=self.loss, q=self.q, epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
            seed=self.seed, weight_decay=self.weight_decay, optimizer=self.optimizer,
        )


@dataclass(frozen=True)
class BcsiSection:
    t_epochs: int = 5
    q: float = 0.7
    lr: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 0.0
    damping: typing.Optional[float] = None
    k: int = 10
    num_runs: int = 3
    seeds: tuple = (1, 2, 3)

    def score_config(self, seed: int) -> ScoreConfig:
        return ScoreConfig(
            loss="gce", epochs=self.t_epochs, q=self.q, lr=self.lr, batch_size=self.batch_size,
            weight_decay=self.weight_decay, damping=self.damping, seed=seed,
        )


@dataclass(frozen=True)
class FinetuneSection:
    lam: float = 0.1
    n_iter: int = 100
    lr: float = 1e-3
    lr_final_factor: float = 1e-3
    weight_decay: float = 1e-4
    reinit_last_layer: bool = True
    seed: int = 0

    def finetune_config(self) -> FineTuneConfig:
        return FineTuneConfig(
            lam=self.lam, n_iter=self.n_iter, lr=self.lr, lr_final_factor=self.lr_final_factor,
            weight_decay=self.weight_decay, reinit_last_layer=self.reinit_last_layer, seed=self.seed,
        )


@dataclass(frozen=True)
class EvalSection:
    seeds: tuple = (0, 1, 2, 3, 4)
    r_sweep: tuple = ()
    bins: int = 20


SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "erm": ErmSection,
    "bcsi": BcsiSection,
    "finetune": FinetuneSection,
    "eval": EvalSection,
}
ALIASES = {"finetune.lambda": "finetune.lam"}


@dataclass(frozen=True)
class PipelineConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    erm: ErmSection = field(default_factory=ErmSection)
    bcsi: BcsiSection = field(default_factory=BcsiSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)
    out: str = "runs/default"

    def dims(self, d: int) -> list[int]:
        C = self.data.C if self.data.source == "synthetic" else 10
        return [d, *self.model.hidden, C]

    def validate(self) -> None:
        d = self.data
        if d.source not in ("synthetic", "idx"):
            raise ConfigError("data.source", "must be 'synthetic' or 'idx'")
        if d.source == "synthetic":
            try:
                d.gen_config().validate()
            except ValueError as exc:
                raise ConfigError("data", str(exc)) from None
        else:
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if not getattr(d, key):
                    raise ConfigError(f"data.{key}", "required when data.source = idx")
            if not 0 <= d.r <= 1:
                raise ConfigError("data.r", "must lie in [0, 1]")
        if d.test_n_per_class < 1:
            raise ConfigError("data.test_n_per_class", "must be >= 1")
        if any(h < 1 for h in self.model.hidden):
            raise ConfigError("model.hidden", "widths must be >= 1")
        try:
            self.erm.train_config().validate()
        except ValueError as exc:
            raise ConfigError("erm", str(exc)) from None
        b = self.bcsi
        if b.t_epochs < 1:
            raise ConfigError("bcsi.t_epochs", "must be >= 1")
        if not 0 < b.q <= 1:
            raise ConfigError("bcsi.q", "must lie in (0, 1]")
        if b.k < 1:
            raise ConfigError("bcsi.k", "must be >= 1")
        if b.num_runs < 1:
            raise ConfigError("bcsi.num_runs", "must be >= 1")
        if len(b.seeds) != b.num_runs:
            raise ConfigError("bcsi.seeds", f"need exactly bcsi.num_runs = {b.num_runs} seeds")
        if len(set(b.seeds)) != len(b.seeds):
            raise ConfigError("bcsi.seeds", "seeds must be distinct")
        if b.damping is not None and b.damping < 0:
            raise ConfigError("bcsi.damping", "must be nonnegative")
        try:
            self.finetune.finetune_config().validate()
        except ValueError as exc:
            raise ConfigError("finetune", str(exc)) from None
        if len(set(self.eval.seeds)) != len(self.eval.seeds):
            raise ConfigError("eval.seeds", "seeds must be distinct")
        if self.eval.bins < 1:
            raise ConfigError("eval.bins", "must be >= 1")

    def with_overrides(self, *, seed: int | None = None, r: float | None = None, out: str | None = None) -> "PipelineConfig":
        """Copy with a master seed and/or bias ratio applied.

        A master seed ``s`` becomes every data and model seed, except the BCSI
        run seeds, which become ``1000 * s + 1 .. 1000 * s + num_runs``.
        """
        cfg = self
        if seed is not None:
            cfg = replace(
                cfg,
                data=replace(cfg.data, seed=seed),
                erm=replace(cfg.erm, seed=seed),
                finetune=replace(cfg.finetune, seed=seed),
                bcsi=replace(cfg.bcsi, seeds=tuple(1000 * seed + j + 1 for j in range(cfg.bcsi.num_runs))),
            )
        if r is not None:
            cfg = replace(cfg, data=replace(cfg.data, r=float(r)))
        if out is not None:
            cfg = replace(cfg, out=out)
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Digest of every setting except the output directory."""
        doc = self.to_dict()
        doc.pop("out")
        blob = json.dumps(doc, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_text(self) -> str:
        lines = []
        for name in SECTIONS:
            section = getattr(self, name)
            for f in fields(section):
                key = "finetune.lambda" if (name, f.name) == ("finetune", "lam") else f"{name}.{f.name}"
                lines.append(f"{key} = {_format(getattr(section, f.name))}")
        lines.append(f"out = {self.out}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _coerce(path: str, raw: str, annotation):
    hint = annotation
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        if hint == typing.Optional[float]:
            return None if raw.lower() in ("auto", "none", "") else float(raw)
        if hint is tuple:
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(float(s) if any(c in s for c in ".eE") else int(s) for s in items)
    except ValueError:
        raise ConfigError(path, f"cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None
    raise ConfigError(path, f"unsupported field type {hint}")


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    values: dict[str, dict] = {name: {} for name in SECTIONS}
    out = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = ALIASES.get(key, key)
        if key == "out":
            out = raw
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(key, "unknown section")
        types = typing.get_type_hints(SECTIONS[section])
        if name not in types:
            raise ConfigError(key, "unknown key")
        values[section][name] = _coerce(key, raw, types[name])
    base = base or PipelineConfig()
    kwargs = {name: replace(getattr(base, name), **vals) for name, vals in values.items()}
    cfg = PipelineConfig(**kwargs, out=out if out is not None else base.out)
    if cfg.model.hidden and not all(isinstance(h, int) for h in cfg.model.hidden):
        raise ConfigError("model.hidden", "widths must be integers")
    return cfg


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc.strerror}") from None
    return parse_config(text)
