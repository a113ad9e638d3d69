"""Experiment configuration: parsing, validation, canonical emission.

The on-disk format is UTF-8 ``key = value`` lines under ``[section]``
headers. Unknown sections or keys are errors: silently ignored typos have
ruined enough experiment sweeps. ``parse_config(emit_config(cfg))`` is the
identity.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .model import ModelConfig

__all__ = ["ConfigError", "ExperimentConfig", "emit_config", "parse_config"]

METHOD_NAMES = ("bitfit", "difffit", "lora", "colora", "full")
INFERENCE_NAMES = ("ckpt-ens", "swag-d", "swag-lr", "deep-ens", "deterministic")

DEFAULT_QUANTILES = tuple(float(i) / 20.0 for i in range(1, 21))


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data_seed: int = 7
    train_count: int = 32
    test_count: int = 16
    method: str = "bitfit"
    rank: int | None = None
    inference: str = "ckpt-ens"
    samples: int = 100
    jitter: float = 1e-8
    quantiles: tuple[float, ...] = DEFAULT_QUANTILES
    epochs: int = 20
    batch_size: int = 4
    checkpoints: int = 100
    lr: float = 1e-3
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    root: str = "runs/experiment"

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHOD_NAMES:
            raise ConfigError(f"unknown method '{self.method}', expected one of {METHOD_NAMES}")
        if self.inference not in INFERENCE_NAMES:
            raise ConfigError(
                f"unknown inference '{self.inference}', expected one of {INFERENCE_NAMES}"
            )
        ranked = self.method in ("lora", "colora")
        if ranked and self.rank is None:
            raise ConfigError(f"method '{self.method}' requires [method] rank")
        if not ranked and self.rank is not None:
            raise ConfigError(f"method '{self.method}' does not take a rank")
        if ranked and self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if self.inference == "deep-ens" and len(self.seeds) < 2:
            raise ConfigError("inference 'deep-ens' requires at least 2 seeds")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"duplicate seeds: {self.seeds}")
        positives = {
            "data.train_count": self.train_count,
            "data.test_count": self.test_count,
            "inference.samples": self.samples,
            "schedule.epochs": self.epochs,
            "schedule.batch_size": self.batch_size,
            "schedule.checkpoints": self.checkpoints,
        }
        for name, value in positives.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.lr <= 0.0:
            raise ConfigError(f"schedule.lr must be positive, got {self.lr}")
        if self.jitter < 0.0:
            raise ConfigError(f"inference.jitter must be >= 0, got {self.jitter}")
        if not self.quantiles or any(not 0.0 < q <= 1.0 for q in self.quantiles) or any(
            b <= a for a, b in zip(self.quantiles, self.quantiles[1:])
        ):
            raise ConfigError(
                f"inference.quantiles must be strictly increasing within (0, 1]: {self.quantiles}"
            )
        if not self.root:
            raise ConfigError("paths.root must be non-empty")
        return self


def _parse_int(section: str, key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: expected an integer, got '{raw}'") from exc


def _parse_float(section: str, key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: expected a number, got '{raw}'") from exc


def _parse_int_list(section: str, key: str, raw: str) -> tuple[int, ...]:
    return tuple(_parse_int(section, key, tok) for tok in raw.split())


def _parse_float_list(section: str, key: str, raw: str) -> tuple[float, ...]:
    return tuple(_parse_float(section, key, tok) for tok in raw.split())


# section -> key -> (kind, target field)
_SCHEMA = {
    "model": {
        "image_height": "int",
        "image_width": "int",
        "patch_size": "int",
        "embed_dim": "int",
        "blocks": "int",
        "mlp_hidden": "int",
        "decoder_channels": "int_list",
        "seed": "int",
    },
    "data": {"seed": "int", "train_count": "int", "test_count": "int"},
    "method": {"name": "str", "rank": "int"},
    "inference": {"name": "str", "samples": "int", "jitter": "float", "quantiles": "float_list"},
    "schedule": {"epochs": "int", "batch_size": "int", "checkpoints": "int", "lr": "float"},
    "experiment": {"seeds": "int_list"},
    "paths": {"root": "str"},
}

_PARSERS = {
    "int": _parse_int,
    "float": _parse_float,
    "int_list": _parse_int_list,
    "float_list": _parse_float_list,
    "str": lambda section, key, raw: raw,
}


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    values: dict[str, dict[str, object]] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
            kind = _SCHEMA[section][key]
            values[section][key] = _PARSERS[kind](section, key, raw.strip())

    def pick(section: str, key: str, default):
        return values.get(section, {}).get(key, default)

    try:
        model = ModelConfig(
            image_height=pick("model", "image_height", 32),
            image_width=pick("model", "image_width", 32),
            patch_size=pick("model", "patch_size", 4),
            embed_dim=pick("model", "embed_dim", 32),
            blocks=pick("model", "blocks", 2),
            mlp_hidden=pick("model", "mlp_hidden", 64),
            decoder_channels=pick("model", "decoder_channels", (16, 8)),
            seed=pick("model", "seed", 0),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid [model] section: {exc}") from exc

    config = ExperimentConfig(
        model=model,
        data_seed=pick("data", "seed", 7),
        train_count=pick("data", "train_count", 32),
        test_count=pick("data", "test_count", 16),
        method=pick("method", "name", "bitfit"),
        rank=pick("method", "rank", None),
        inference=pick("inference", "name", "ckpt-ens"),
        samples=pick("inference", "samples", 100),
        jitter=pick("inference", "jitter", 1e-8),
        quantiles=pick("inference", "quantiles", DEFAULT_QUANTILES),
        epochs=pick("schedule", "epochs", 20),
        batch_size=pick("schedule", "batch_size", 4),
        checkpoints=pick("schedule", "checkpoints", 100),
        lr=pick("schedule", "lr", 1e-3),
        seeds=pick("experiment", "seeds", (0, 1, 2, 3, 4)),
        root=pick("paths", "root", "runs/experiment"),
    )
    return config.validate()


def emit_config(config: ExperimentConfig) -> str:
    """Canonical text form; parsing it reproduces ``config`` exactly."""
    model = config.model
    lines = [
        "[model]",
        f"image_height = {model.image_height}",
        f"image_width = {model.image_width}",
        f"patch_size = {model.patch_size}",
        f"embed_dim = {model.embed_dim}",
        f"blocks = {model.blocks}",
        f"mlp_hidden = {model.mlp_hidden}",
        "decoder_channels = " + " ".join(str(c) for c in model.decoder_channels),
        f"seed = {model.seed}",
        "",
        "[data]",
        f"seed = {config.data_seed}",
        f"train_count = {config.train_count}",
        f"test_count = {config.test_count}",
        "",
        "[method]",
        f"name = {config.method}",
    ]
    if config.rank is not None:
        lines.append(f"rank = {config.rank}")
    lines += [
        "",
        "[inference]",
        f"name = {config.inference}",
        f"samples = {config.samples}",
        f"jitter = {config.jitter!r}",
        "quantiles = " + " ".join(repr(q) for q in config.quantiles),
        "",
        "[schedule]",
        f"epochs = {config.epochs}",
        f"batch_size = {config.batch_size}",
        f"checkpoints = {config.checkpoints}",
        f"lr = {config.lr!r}",
        "",
        "[experiment]",
        "seeds = " + " ".join(str(s) for s in config.seeds),
        "",
        "[paths]",
        f"root = {config.root}",
        "",
    ]
    return "\n".join(lines)
