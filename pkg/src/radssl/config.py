"""Flat ``key = value`` run configuration.

One file covers the encoder shape, the training schedule, the loss weights
and the dataset location::

    # comments and blank lines are ignored
    dataset = data/manifest.csv
    epochs = 500
    beta = 0.5
    lambda = 1.0

Unknown keys are an error. ``d_model`` defaults to ``auto``, which takes the
number of feature columns from the dataset.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .encoder import EncoderConfig
from .losses import LossWeights
from .pipeline import TrainConfig


class ConfigError(ValueError):
    pass


def _opt_int(v: str) -> int | None:
    return None if v.lower() in ("none", "") else int(v)


def _bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _d_model(v: str):
    return "auto" if v.lower() == "auto" else int(v)


_ENCODER_KEYS = {
    "n_blocks": int,
    "n_heads": int,
    "d_model": _d_model,
    "d_embed": int,
    "d_recon_hidden": int,
    "use_position_encoding": _bool,
}
_LOSS_KEYS = {"beta": ("beta", float), "lambda": ("lam", float), "tau": ("tau", float)}
_TRAIN_KEYS = {
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "weight_decay": float,
    "k_max": int,
    "K": int,
    "seed": int,
    "finetune_epochs": int,
    "finetune_batch_size": int,
    "head_hidden": int,
    "task_mode": str,
    "k_fixed": _opt_int,
    "recon_target": str,
    "recon_reduction": str,
    "label_fraction": float,
}
_RUN_KEYS = {"dataset": str, "delimiter": str, "folds": int, "repetitions": int}

KEYS = tuple(_ENCODER_KEYS) + tuple(_LOSS_KEYS) + tuple(_TRAIN_KEYS) + tuple(_RUN_KEYS)


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    n_blocks: int = 3
    n_heads: int = EncoderConfig.n_heads
    d_model: Any = "auto"
    d_embed: int = 8
    d_recon_hidden: int = 100
    use_position_encoding: bool = False
    dataset: str | None = None
    delimiter: str = ","
    folds: int = 10
    repetitions: int = 5

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")

    def encoder_config(self, n_features: int | None = None) -> EncoderConfig:
        d_model = self.d_model
        if d_model == "auto":
            if n_features is None:
                raise ConfigError("d_model = auto needs the dataset's feature count")
            d_model = n_features
        elif n_features is not None and d_model != n_features:
            raise ConfigError(f"d_model = {d_model} but the dataset has {n_features} feature columns")
        return EncoderConfig(self.n_blocks, self.n_heads, d_model, self.d_embed, self.d_recon_hidden,
                             self.use_position_encoding)

    def items(self) -> list[tuple[str, Any]]:
        """Every key with its resolved value, in a fixed order."""
        out = [(k, getattr(self, k)) for k in _ENCODER_KEYS]
        w = self.train.loss_weights
        out += [(k, getattr(w, attr)) for k, (attr, _) in _LOSS_KEYS.items()]
        out += [(k, getattr(self.train, k)) for k in _TRAIN_KEYS]
        out += [(k, getattr(self, k)) for k in _RUN_KEYS]
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.items())

    def hash(self) -> str:
        """SHA-256 of the canonical text form; equal configs hash equal."""
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        return from_mapping({**dict(self.items()), **{k: v for k, v in overrides.items() if v is not None}})


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def from_mapping(values: Mapping[str, Any]) -> RunConfig:
    """Build a config from raw strings or already-typed values."""
    unknown = set(values) - set(KEYS)
    if unknown:
        raise ConfigError(f"unknown key(s): {sorted(unknown)}")

    def conv(key, parser):
        v = values[key]
        if isinstance(v, str):
            if key in ("dataset", "delimiter", "task_mode", "recon_target", "recon_reduction"):
                return None if key == "dataset" and v.lower() == "none" else v
            try:
                return parser(v)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        return v

    try:
        weights = LossWeights(**{attr: conv(k, p) for k, (attr, p) in _LOSS_KEYS.items() if k in values})
        train = TrainConfig(loss_weights=weights, **{k: conv(k, p) for k, p in _TRAIN_KEYS.items() if k in values})
        run = {k: conv(k, p) for k, p in {**_ENCODER_KEYS, **_RUN_KEYS}.items() if k in values}
        cfg = RunConfig(train=train, **run)
        if cfg.d_model != "auto":
            cfg.encoder_config()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path: str | os.PathLike | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_text(path.read_text(), str(path)))
        if values.get("dataset") and values["dataset"].lower() != "none" and not Path(values["dataset"]).is_absolute():
            values["dataset"] = str(path.parent / values["dataset"])
    cfg = from_mapping(values)
    return cfg.with_overrides(overrides or {}) if overrides else cfg


