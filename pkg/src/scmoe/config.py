"""Run configuration: nested dataclasses loaded from canonical JSON with dotted-path overrides."""

from __future__ import annotations

import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .data import SynthLanguageSpec
from .encoder import ChunkSpec
from .experiment import OptimConfig, parse_chunk_policy
from .model import LossWeights, ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    corpus_dir: str = "data/corpus"
    spec: SynthLanguageSpec = field(default_factory=SynthLanguageSpec)
    n_train: int = 800
    n_dev: int = 100
    n_test: int = 100
    switch_prob: float = 0.3
    seed: int = 0


@dataclass
class TrainConfig:
    chunk_policy: typing.Any = "dynamic"  # "dynamic", "full" or [chunk, left]
    eval_every: int = 250
    checkpoint_every: int = 500
    init_from: str | None = None  # optional checkpoint whose matching weights seed a fresh run


@dataclass
class DecodeConfig:
    beam: int = 10
    chunk: int = -1
    left_chunks: int = -1
    split: str = "test"

    @property
    def spec(self) -> ChunkSpec:
        return ChunkSpec(self.chunk, self.left_chunks)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=lambda: LossWeights(lam=0.3, alpha=0.3))
    decode_weights: LossWeights = field(default_factory=lambda: LossWeights(lam=0.3, alpha=0.6))
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    seed: int = 0
    output_dir: str = "runs"

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:10]

    def validate(self) -> "RunConfig":
        try:
            self.model.validate()
            self.data.spec.validate()
            ChunkSpec(self.decode.chunk, self.decode.left_chunks)
            parse_chunk_policy(self.train.chunk_policy)
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from e
        if not 0.0 <= self.data.switch_prob <= 1.0:
            raise ConfigError("data.switch_prob must lie in [0, 1]")
        if self.model.input_dim != self.data.spec.feature_dim:
            raise ConfigError(f"model.input_dim={self.model.input_dim} but data.spec.feature_dim="
                              f"{self.data.spec.feature_dim}")
        if self.model.vocab_size != self.data.spec.vocab_size:
            raise ConfigError(f"model.vocab_size={self.model.vocab_size} but the corpus vocabulary has "
                              f"{self.data.spec.vocab_size} entries")
        for name in ("steps", "batch_size", "warmup"):
            if getattr(self.optim, name) < 1:
                raise ConfigError(f"optim.{name} must be >= 1")
        if self.decode.beam < 1:
            raise ConfigError("decode.beam must be >= 1")
        if self.decode.split not in ("train", "dev", "test"):
            raise ConfigError(f"unknown split {self.decode.split!r}")
        return self


def _check_scalar(path: str, value, expected):
    if expected is typing.Any:
        return value
    args = typing.get_args(expected)
    if type(None) in args:  # optional field
        if value is None:
            return None
        (expected,) = [a for a in args if a is not type(None)]
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected in (int, float, str, bool) and (type(value) is not expected):
        raise ConfigError(f"{path}: expected {expected.__name__}, got {value!r}")
    return value


def _build(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls) if f.init}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        t = hints[name]
        path = prefix + name
        if is_dataclass(t):
            kwargs[name] = _build(t, value, path + ".")
        else:
            kwargs[name] = _check_scalar(path, value, t)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{prefix or 'config'}: {e}") from e


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data).validate()


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    for text in overrides:
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{'.'.join(path)}: {part} is not a section")
        node[path[-1]] = value
    return data


def load(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the JSON file (if any), then ``--set`` overrides; validated."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    # sections given only partially keep their other defaults
    merged = _merge(RunConfig().to_dict(), data)
    return from_dict(apply_overrides(merged, overrides or []))


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out
