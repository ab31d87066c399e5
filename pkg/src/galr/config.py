"""Run configuration: JSON files checked against a published schema.

Only explicit values count; environment variables are never consulted.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .separator import HyperParams
from .training import SYNTHETIC_KINDS


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 1e-6
    clip_norm: float = 5.0
    patience: int = 10
    zero_mean: bool = False
    max_seconds: float | None = None


@dataclass(frozen=True)
class DataSettings:
    kind: str = "disjoint_band_noise"
    train_count: int = 64
    val_count: int = 16
    length_s: float = 1.0
    seed: int = 0
    snr_low: float = 0.0
    snr_high: float = 5.0


@dataclass(frozen=True)
class PathSettings:
    checkpoint: str = "galr.ckpt"
    metrics: str | None = None


def _props(cls, kinds):
    return {f.name: kinds[f.name] for f in fields(cls)}


_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_POS = {"type": "number", "exclusiveMinimum": 0}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "GALR run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "hyperparams": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                **{k: _INT for k in ("D", "M", "K", "H", "J", "N")},
                "C": {"type": "integer", "minimum": 2},
                "Q": _NONNEG_INT,
                "local_model": {"enum": ["recurrent", "attentive"]},
                "global_model": {"enum": ["recurrent", "attentive"]},
                "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": _props(TrainSettings, {
                "epochs": _INT, "batch_size": _INT, "seed": _NONNEG_INT, "lr": _POS,
                "weight_decay": {"type": "number", "minimum": 0}, "clip_norm": _POS, "patience": _INT,
                "zero_mean": {"type": "boolean"}, "max_seconds": {"type": ["number", "null"], "exclusiveMinimum": 0},
            }),
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": _props(DataSettings, {
                "kind": {"enum": list(SYNTHETIC_KINDS)}, "train_count": _INT, "val_count": _NONNEG_INT,
                "length_s": _POS, "seed": _NONNEG_INT, "snr_low": {"type": "number"},
                "snr_high": {"type": "number"},
            }),
        },
        "paths": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"checkpoint": {"type": "string", "minLength": 1},
                           "metrics": {"type": ["string", "null"]}},
        },
    },
}


@dataclass(frozen=True)
class RunConfig:
    hyperparams: HyperParams = field(default_factory=HyperParams)
    training: TrainSettings = field(default_factory=TrainSettings)
    data: DataSettings = field(default_factory=DataSettings)
    paths: PathSettings = field(default_factory=PathSettings)

    def __post_init__(self):
        if self.data.snr_low > self.data.snr_high:
            raise ConfigError(f"snr_low={self.data.snr_low} exceeds snr_high={self.data.snr_high}")

    def to_dict(self) -> dict:
        return {"hyperparams": self.hyperparams.to_dict(), "training": asdict(self.training),
                "data": asdict(self.data), "paths": asdict(self.paths)}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        try:
            jsonschema.validate(data, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"{where}: {exc.message}") from None
        return cls(HyperParams.from_dict(data.get("hyperparams", {})),
                   TrainSettings(**data.get("training", {})),
                   DataSettings(**data.get("data", {})),
                   PathSettings(**data.get("paths", {})))


def dumps(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def loads(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return RunConfig.from_dict(data)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg))
