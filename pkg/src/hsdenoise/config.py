"""Experiment configuration: a strict TOML document with a fixed key tree.

Unknown sections or keys are rejected with their full path. CLI flags may
override selected keys; the resolved document is echoed into run outputs so
every artifact records the configuration that produced it.

Key tree (defaults in parentheses):

    [dataset]  train = [paths/globs], test = [], sensor ("main"),
               normalization ("global" | "percentile" | "none"),
               center_crop (0 = off)
    [patches]  size (64), strides ([64, 32, 32]), scales ([1.0, 0.5, 0.25])
    [model]    p1, p2, rank, patch_side, t1, t2, estimator, lam_init,
               sensors ({} -> derived from dataset.sensor and the data)
    [noise]    kind, sigma, sigma_min, sigma_max, beta, eta, band_fraction,
               column_fraction, amplitude
    [train]    mode, batch_size, epochs, max_steps (0 = epochs), lr,
               lr_halving_epochs, seed, ssl_n, epoch_multiplier, blind,
               augment, checkpoint_every
    [output]   checkpoint ("model.ckpt"), log ("train.log")
"""

from __future__ import annotations

import glob as globlib
import json
from dataclasses import dataclass, field
from typing import Optional

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigError
from .model import ModelConfig
from .noise import NoiseSpec
from .training import TrainConfig

_SCHEMA = {
    "dataset": {
        "train": list,
        "test": list,
        "sensor": str,
        "normalization": str,
        "center_crop": int,
    },
    "patches": {
        "size": int,
        "strides": list,
        "scales": list,
    },
    "model": {
        "p1": int,
        "p2": int,
        "rank": int,
        "patch_side": int,
        "t1": int,
        "t2": int,
        "estimator": bool,
        "lam_init": float,
        "sensors": dict,
    },
    "noise": {
        "kind": str,
        "sigma": float,
        "sigma_min": float,
        "sigma_max": float,
        "beta": float,
        "eta": float,
        "band_fraction": float,
        "column_fraction": list,
        "amplitude": float,
    },
    "train": {
        "mode": str,
        "batch_size": int,
        "epochs": int,
        "max_steps": int,
        "lr": float,
        "lr_halving_epochs": list,
        "seed": int,
        "ssl_n": int,
        "epoch_multiplier": int,
        "blind": bool,
        "augment": bool,
        "checkpoint_every": int,
    },
    "output": {
        "checkpoint": str,
        "log": str,
    },
}


@dataclass
class DatasetConfig:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    sensor: str = "main"
    normalization: str = "global"
    center_crop: int = 0

    def __post_init__(self):
        if self.normalization not in ("global", "percentile", "none"):
            raise ConfigError(
                f"dataset.normalization: expected global, percentile or none, got {self.normalization!r}"
            )

    def resolve_paths(self, key: str = "train") -> list:
        patterns = getattr(self, key)
        paths = []
        for pattern in patterns:
            hits = sorted(globlib.glob(str(pattern)))
            if not hits:
                raise ConfigError(f"dataset.{key}: no files match {pattern!r}")
            paths.extend(hits)
        return paths


@dataclass
class PatchConfig:
    size: int = 64
    strides: tuple = (64, 32, 32)
    scales: tuple = (1.0, 0.5, 0.25)

    def __post_init__(self):
        if len(self.strides) != len(self.scales):
            raise ConfigError("patches: strides and scales must have equal length")


@dataclass
class OutputConfig:
    checkpoint: str = "model.ckpt"
    log: str = "train.log"


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    patches: PatchConfig
    model: ModelConfig
    train: TrainConfig
    output: OutputConfig

    def to_dict(self) -> dict:
        return {
            "dataset": {
                "train": list(self.dataset.train),
                "test": list(self.dataset.test),
                "sensor": self.dataset.sensor,
                "normalization": self.dataset.normalization,
                "center_crop": self.dataset.center_crop,
            },
            "patches": {
                "size": self.patches.size,
                "strides": list(self.patches.strides),
                "scales": list(self.patches.scales),
            },
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "output": {"checkpoint": self.output.checkpoint, "log": self.output.log},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _validate_tree(doc: dict) -> None:
    for section, content in doc.items():
        if section not in _SCHEMA:
            raise ConfigError(f"{section}: unknown section")
        if not isinstance(content, dict):
            raise ConfigError(f"{section}: expected a table")
        for key, value in content.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{section}.{key}: unknown key")
            expected = _SCHEMA[section][key]
            if expected is float and isinstance(value, int) and not isinstance(value, bool):
                continue
            if expected is int and isinstance(value, bool):
                raise ConfigError(f"{section}.{key}: expected {expected.__name__}, got bool")
            if not isinstance(value, expected):
                raise ConfigError(
                    f"{section}.{key}: expected {expected.__name__}, got {type(value).__name__}"
                )


def parse_experiment(text: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Parse and validate a TOML experiment document.

    ``overrides`` maps dotted paths ("train.seed") to replacement values and
    is applied before validation so provenance reflects the effective run.
    """
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc
    for path, value in (overrides or {}).items():
        section, _, key = path.partition(".")
        if not key:
            raise ConfigError(f"{path}: overrides must use section.key form")
        doc.setdefault(section, {})[key] = value
    _validate_tree(doc)

    dataset = DatasetConfig(**doc.get("dataset", {}))
    patch_raw = dict(doc.get("patches", {}))
    if "strides" in patch_raw:
        patch_raw["strides"] = tuple(int(v) for v in patch_raw["strides"])
    if "scales" in patch_raw:
        patch_raw["scales"] = tuple(float(v) for v in patch_raw["scales"])
    patches = PatchConfig(**patch_raw)

    model_raw = dict(doc.get("model", {}))
    sensors = {str(k): int(v) for k, v in model_raw.pop("sensors", {}).items()}
    model_defaults = dict(p1=64, p2=1024, rank=3, patch_side=5, t1=12, t2=5, estimator=False, lam_init=1e-3)
    model_defaults.update(model_raw)
    model = ModelConfig(sensors=sensors or {dataset.sensor: 0}, **model_defaults)

    noise_raw = dict(doc.get("noise", {}))
    if "column_fraction" in noise_raw:
        noise_raw["column_fraction"] = tuple(float(v) for v in noise_raw["column_fraction"])
    noise = NoiseSpec(**noise_raw)

    train_raw = dict(doc.get("train", {}))
    if "lr_halving_epochs" in train_raw:
        train_raw["lr_halving_epochs"] = tuple(int(v) for v in train_raw["lr_halving_epochs"])
    if train_raw.get("max_steps", 0) in (0, None):
        train_raw.pop("max_steps", None)
    train = TrainConfig(noise=noise, **train_raw)

    output = OutputConfig(**doc.get("output", {}))
    return ExperimentConfig(dataset=dataset, patches=patches, model=model, train=train, output=output)


def load_experiment(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_experiment(f.read(), overrides)
