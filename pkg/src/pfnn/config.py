"""Flat key=value experiment configuration shared by the CLI and run
snapshots. Unknown keys are errors so a stale snapshot fails loudly."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .layers import ModelConfig, config_from_mapping, config_to_mapping
from .trainer import TrainConfig

MODEL_KEYS = frozenset({
    "conv_widths", "kernel", "head_units", "dropout_rate", "classes",
    "enable_gagm", "enable_sevector", "reduction_ratio", "seed",
})
TRAIN_KEYS = frozenset({
    "learning_rate", "batch_size", "max_epochs", "lambda_fs", "rlrop_patience",
    "rlrop_factor", "early_stop_patience", "min_delta", "val_fraction",
})
CLI_KEYS = frozenset({"test_fraction"})
KNOWN_KEYS = MODEL_KEYS | TRAIN_KEYS | CLI_KEYS


class ConfigError(ValueError):
    pass


def read_kv_file(path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment, blanks ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        out[key] = value
    return out


def write_kv_file(path, mapping: Mapping[str, str]) -> None:
    lines = [f"{key}={mapping[key]}" for key in mapping]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    train: TrainConfig
    test_fraction: float = 0.2

    @property
    def seed(self) -> int:
        return self.train.seed


def experiment_from_mapping(mapping: Mapping[str, str]) -> ExperimentConfig:
    unknown = sorted(set(mapping) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    model = config_from_mapping(mapping)
    train_kwargs = {}
    for key in ("learning_rate", "lambda_fs", "rlrop_factor", "min_delta", "val_fraction"):
        if key in mapping:
            train_kwargs[key] = float(mapping[key])
    for key in ("batch_size", "max_epochs", "rlrop_patience", "early_stop_patience"):
        if key in mapping:
            train_kwargs[key] = int(mapping[key])
    train = TrainConfig(seed=model.seed, **train_kwargs)
    test_fraction = float(mapping.get("test_fraction", "0.2"))
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in [0,1), got {test_fraction}")
    return ExperimentConfig(model=model, train=train, test_fraction=test_fraction)


def experiment_to_mapping(config: ExperimentConfig) -> dict[str, str]:
    out = config_to_mapping(config.model)
    out.update({
        "learning_rate": repr(config.train.learning_rate),
        "batch_size": str(config.train.batch_size),
        "max_epochs": str(config.train.max_epochs),
        "lambda_fs": repr(config.train.lambda_fs),
        "rlrop_patience": str(config.train.rlrop_patience),
        "rlrop_factor": repr(config.train.rlrop_factor),
        "early_stop_patience": str(config.train.early_stop_patience),
        "min_delta": repr(config.train.min_delta),
        "val_fraction": repr(config.train.val_fraction),
        "test_fraction": repr(config.test_fraction),
    })
    return out
