"""Pipeline configuration: one JSON document with a section per stage."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .alignment import HEADS, AlignConfig
from .clients import EndpointConfig
from .data import SyntheticConfig
from .encoder import PretrainConfig
from .evaluation import ClassifierConfig


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"
    n_clients: int = 2000
    synthetic: SyntheticConfig = SyntheticConfig(signal=0.6)
    csv_path: str | None = None
    schema: dict[str, str] = field(default_factory=dict)
    mcc_names_path: str | None = None
    holdout_frac: float = 0.1
    include_unlabeled_in_alignment: bool = True

    def __post_init__(self):
        if self.source not in ("synthetic", "csv"):
            raise ConfigError("data.source", "must be 'synthetic' or 'csv'")
        if self.source == "csv" and not self.csv_path:
            raise ConfigError("data.csv_path", "required when source is 'csv'")
        if not 0 < self.holdout_frac < 1:
            raise ConfigError("data.holdout_frac", "must be in (0, 1)")


@dataclass(frozen=True)
class SummarizerSection:
    currency: str = "RUB"
    prompt_format: str = "stats"
    raw_max_events: int = 100

    def __post_init__(self):
        if self.prompt_format not in ("stats", "raw"):
            raise ConfigError("summarizer.prompt_format", "must be 'stats' or 'raw'")


@dataclass(frozen=True)
class GenerationSection:
    mock: bool = True
    mock_seed: int = 0
    endpoint: EndpointConfig | None = None

    def __post_init__(self):
        if not self.mock and self.endpoint is None:
            raise ConfigError("generation.endpoint", "required unless mock is true")


@dataclass(frozen=True)
class EmbeddingSection:
    mock: bool = True
    mock_seed: int = 0
    dim: int = 256
    endpoint: EndpointConfig | None = None

    def __post_init__(self):
        if not self.mock and self.endpoint is None:
            raise ConfigError("embedding.endpoint", "required unless mock is true")
        if self.mock and self.dim < 8:
            raise ConfigError("embedding.dim", "must be >= 8")


@dataclass(frozen=True)
class EncoderSection:
    d_emb: int = 16
    hidden: int = 64
    d_out: int = 64
    pooling: str = "mean"

    def __post_init__(self):
        if self.pooling not in ("last", "mean"):
            raise ConfigError("encoder.pooling", "must be 'last' or 'mean'")


@dataclass(frozen=True)
class PretrainSection:
    epochs: int = 5
    batch_size: int = 64
    n_slices: int = 5
    min_len: int = 15
    max_len: int = 150
    tau: float = 0.1
    optimizer: str = "adam"
    lr: float = 3e-3
    momentum: float = 0.9
    clip: float = 5.0

    def build(self, seed: int) -> PretrainConfig:
        return PretrainConfig(**dataclasses.asdict(self), seed=seed)


@dataclass(frozen=True)
class AlignmentSection:
    heads: tuple[str, ...] = HEADS
    epochs: int = 10
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 3e-3
    momentum: float = 0.9
    clip: float = 5.0
    tau_init: float | None = None
    bias_init: float | None = None
    learn_tau: bool = True
    lambda_ortho: float = 0.1
    export_block: str = "full"
    warm_start: bool = True

    def __post_init__(self):
        bad = [h for h in self.heads if h not in HEADS]
        if bad or not self.heads:
            raise ConfigError("alignment.heads", f"each head must be one of {HEADS}")

    def build(self, head: str, seed: int) -> AlignConfig:
        kw = dataclasses.asdict(self)
        del kw["heads"], kw["warm_start"]
        return AlignConfig(head=head, seed=seed, **kw)


@dataclass(frozen=True)
class EvalSection:
    k: int = 5
    task: str = "label"
    variants: tuple[str, ...] = ()  # empty means every exported variant
    classifier: ClassifierConfig = ClassifierConfig()


@dataclass(frozen=True)
class BenchmarkSection:
    n_samples: int = 200
    warmup: int = 10
    batch_size: int = 64


@dataclass(frozen=True)
class PipelineConfig:
    data: DataSection = DataSection()
    summarizer: SummarizerSection = SummarizerSection()
    generation: GenerationSection = GenerationSection()
    embedding: EmbeddingSection = EmbeddingSection()
    encoder: EncoderSection = EncoderSection()
    pretrain: PretrainSection = PretrainSection()
    alignment: AlignmentSection = AlignmentSection()
    eval: EvalSection = EvalSection()
    benchmark: BenchmarkSection = BenchmarkSection()
    seed: int = 0
    artifacts_dir: str = "artifacts"

    def section_hash(self, *names: str) -> str:
        payload = {n: to_dict(getattr(self, n)) for n in names}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def to_json(self) -> str:
        return json.dumps(to_dict(self), indent=2, sort_keys=True) + "\n"


def to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(x) for x in obj]
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    return obj


def _build(tp, value, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _build(args[0], value, path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        for key in value:
            if key not in names:
                raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
        kwargs = {k: _build(hints[k], v, f"{path}.{k}" if path else k) for k, v in value.items()}
        try:
            return tp(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(path, str(exc)) from None
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, "expected a list")
        args = typing.get_args(tp)
        item = args[0]
        return tuple(_build(item, v, f"{path}[{i}]") for i, v in enumerate(value))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        return dict(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is int or tp is bool or tp is str:
        if type(value) is not tp:
            raise ConfigError(path, f"expected {tp.__name__}, got {value!r}")
        return value
    return value


def config_from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data, "")


def _set_path(data: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(dotted, "cannot set a key below a non-object value")
    node[keys[-1]] = value


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> PipelineConfig:
    """Read a JSON config (or start from defaults) and apply dotted-key overrides."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"{path}: invalid JSON: {exc}") from None
    for key, value in (overrides or {}).items():
        _set_path(data, key, value)
    return config_from_dict(data)
