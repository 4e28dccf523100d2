"""Experiment configuration: one JSON document fully determines a run.

Unknown fields are rejected, and every invariant violation surfaces as a
:class:`ConfigError` naming the offending field path.
"""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .data import DatasetSpec
from .distill import DistillConfig
from .fed import FederationConfig
from .subfm import CompressionSpec
from .transformer import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    """Server-side training of the full model on the source rule (stands in for a pretrained checkpoint)."""

    steps: int = 600
    lr: float = 1e-3
    batch_size: int = 32
    source_size: int = 4000
    source_rule: str = "majority"

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.source_size < 1:
            raise ValueError("steps >= 0, batch_size >= 1 and source_size >= 1 required")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    compression: CompressionSpec = field(default_factory=CompressionSpec)
    distill: DistillConfig = field(default_factory=DistillConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    distill_corpus_size: int = 1000
    test_size: int = 500
    probe_size: int = 64
    output_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        m, d = self.model, self.dataset
        if d.vocab_size != m.vocab_size or d.num_classes != m.num_classes:
            raise ConfigError("dataset: vocab_size/num_classes must match model")
        if d.seq_len > m.max_seq_len:
            raise ConfigError("dataset.seq_len: exceeds model.max_seq_len")
        if self.distill_corpus_size < 1 or self.test_size < 1 or self.probe_size < 1:
            raise ConfigError("distill_corpus_size/test_size/probe_size must be >= 1")
        if d.n < self.federation.num_clients:
            raise ConfigError("dataset.n: fewer samples than federation.num_clients")
        if self.compression.layers is not None and any(not 0 <= i < m.num_layers for i in self.compression.layers):
            raise ConfigError("compression.layers: index outside the model")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, federation=replace(self.federation, seed=seed))

    def with_federation(self, **changes) -> "ExperimentConfig":
        return replace(self, federation=replace(self.federation, **changes))

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["federation"].pop("seed")
        if doc["compression"]["layers"] is not None:
            doc["compression"]["layers"] = list(doc["compression"]["layers"])
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_SECTIONS = {
    "model": ModelConfig,
    "compression": CompressionSpec,
    "distill": DistillConfig,
    "federation": FederationConfig,
    "dataset": DatasetSpec,
    "pretrain": PretrainConfig,
}
_EXCLUDED = {"federation": {"seed"}}


def _check_type(path: str, value: Any, expected: Any) -> Any:
    if expected in (int, "int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected integer, got {value!r}")
    elif expected in (float, "float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {value!r}")
        value = float(value)
    elif expected in (str, "str"):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {value!r}")
    return value


def _build(section: str, cls, doc: Any):
    if not isinstance(doc, dict):
        raise ConfigError(f"{section}: expected an object")
    allowed = {f.name: f for f in fields(cls)} if dataclasses.is_dataclass(cls) else {}
    for name in _EXCLUDED.get(section, ()):
        allowed.pop(name, None)
    kwargs = {}
    for key, value in doc.items():
        if key not in allowed:
            raise ConfigError(f"{section}.{key}: unknown field")
        ftype = allowed[key].type
        if section == "compression" and key == "layers":
            if value is not None:
                if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                    raise ConfigError(f"{section}.{key}: expected a list of integers or null")
                value = tuple(value)
        else:
            value = _check_type(f"{section}.{key}", value, ftype)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def config_from_dict(doc: Any) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config: expected a JSON object")
    kwargs: dict[str, Any] = {}
    top = {f.name: f for f in fields(ExperimentConfig)}
    for key, value in doc.items():
        if key not in top:
            raise ConfigError(f"{key}: unknown field")
        if key in _SECTIONS:
            kwargs[key] = _build(key, _SECTIONS[key], value)
        else:
            kwargs[key] = _check_type(key, value, top[key].type)
    try:
        cfg = ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"config: {exc}") from exc
    return cfg.with_seed(cfg.seed)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc})") from exc
    return config_from_dict(doc)


def derive_seed(seed: int, tag: str) -> int:
    """Independent sub-seed for a named purpose."""
    return int(np.random.SeedSequence([seed, zlib.crc32(tag.encode())]).generate_state(1)[0])
