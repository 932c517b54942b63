"""Layered run configuration: built-in defaults < TOML file < ``MUSE_*`` env < flags.

Keys live in four sections plus a top-level ``seed``::

    seed = 13
    [data]        path, split_ratios, resplit, min_freq, strict_images
    [model]       d_model, n_heads, ... fusion
    [train]       epochs, batch_size, lr_encoder, ... patience
    [generation]  strategy, beam_width, max_decode_len, length_penalty

Environment variables are ``MUSE_SEED`` or ``MUSE_<SECTION>_<KEY>``
(e.g. ``MUSE_TRAIN_EPOCHS=3``); values are parsed as JSON when possible.
Unknown keys are rejected at every layer.
"""

from __future__ import annotations

import copy
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Mapping, Optional

from .generator import GenerationConfig
from .model import ModelConfig
from .training import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ENV_PREFIX = "MUSE_"
CONFIG_FILENAME = "config.json"


class ConfigError(ValueError):
    pass


def _defaults() -> dict:
    model = {f.name: f.default for f in fields(ModelConfig) if f.name != "vocab_size"}
    train = TrainConfig().to_dict()
    del train["phase"], train["seed"]
    return {
        "seed": 13,
        "data": {
            "path": None,
            "split_ratios": [0.85, 0.05, 0.10],
            "resplit": False,
            "min_freq": 1,
            "strict_images": False,
        },
        "model": model,
        "train": train,
        "generation": asdict(GenerationConfig()),
    }


DEFAULTS = _defaults()
SECTIONS = tuple(k for k, v in DEFAULTS.items() if isinstance(v, dict))
# keys whose default is None but which accept a value of this type
_OPTIONAL_TYPES = {("data", "path"): str, ("train", "patience"): int, ("train", "grad_clip"): float}


def _coerce(where: str, default: Any, value: Any, optional_type=None) -> Any:
    if value is None:
        if default is None or optional_type is not None:
            return None
        raise ConfigError(f"{where} cannot be null")
    kind = optional_type or (type(default) if default is not None else None)
    if kind is None:
        return value
    if kind is bool:
        if isinstance(value, bool):
            return value
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif kind is str:
        if isinstance(value, str):
            return value
    elif kind is list:
        if isinstance(value, (list, tuple)):
            items = list(value)
            if default and all(isinstance(x, float) for x in default):
                if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in items):
                    raise ConfigError(f"{where} must be a list of numbers, got {value!r}")
                return [float(x) for x in items]
            return [str(x) for x in items]
    raise ConfigError(f"{where} expects {kind.__name__}, got {value!r}")


def merge(base: dict, layer: Mapping, origin: str) -> dict:
    """Overlay ``layer`` onto ``base`` after checking every key and type."""
    out = copy.deepcopy(base)
    for key, value in layer.items():
        if key not in DEFAULTS:
            raise ConfigError(f"{origin}: unknown config key {key!r}")
        if key in SECTIONS:
            if not isinstance(value, Mapping):
                raise ConfigError(f"{origin}: [{key}] must be a table")
            for sub, v in value.items():
                if sub not in DEFAULTS[key]:
                    raise ConfigError(f"{origin}: unknown config key '{key}.{sub}'")
                out[key][sub] = _coerce(
                    f"{origin}: {key}.{sub}", DEFAULTS[key][sub], v, _OPTIONAL_TYPES.get((key, sub))
                )
        else:
            out[key] = _coerce(f"{origin}: {key}", DEFAULTS[key], value)
    return out


def _parse_scalar(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def dotted_to_nested(pairs: Mapping[str, Any]) -> dict:
    """``{"train.epochs": 3, "seed": 7}`` -> ``{"train": {"epochs": 3}, "seed": 7}``."""
    out: dict = {}
    for key, value in pairs.items():
        section, dot, sub = key.partition(".")
        if dot:
            out.setdefault(section, {})[sub] = value
        else:
            out[key] = value
    return out


def env_layer(environ: Mapping[str, str]) -> dict:
    pairs = {}
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        if rest in DEFAULTS and rest not in SECTIONS:
            key = rest
        else:
            section, _, sub = rest.partition("_")
            if section not in SECTIONS or not sub:
                raise ConfigError(f"environment: unknown config variable {name}")
            key = f"{section}.{sub}"
        pairs[key] = _parse_scalar(environ[name])
    return dotted_to_nested(pairs)


def parse_assignment(text: str) -> tuple[str, Any]:
    """Parse a ``--set section.key=value`` flag."""
    key, eq, value = text.partition("=")
    if not eq or not key:
        raise ConfigError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), _parse_scalar(value)


class RunConfig:
    """Fully resolved configuration for one command invocation."""

    def __init__(self, values: Optional[Mapping] = None):
        self.values = merge(DEFAULTS, values or {}, "config")
        # constructing the typed configs validates cross-field constraints early
        self.train_config("finetune")
        self.generation_config()
        try:
            ModelConfig(vocab_size=8, **self.model_kwargs())
        except ValueError as exc:
            raise ConfigError(f"invalid [model] settings: {exc}") from exc
        max_len = self.values["model"]["max_token_length"]
        if self.values["generation"]["max_decode_len"] > max_len:
            raise ConfigError(
                f"generation.max_decode_len={self.values['generation']['max_decode_len']} "
                f"exceeds model.max_token_length={max_len}"
            )

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def data(self) -> dict:
        return self.values["data"]

    def model_kwargs(self) -> dict:
        return dict(self.values["model"])

    def train_config(self, phase: str) -> TrainConfig:
        try:
            return TrainConfig(phase=phase, seed=self.seed, **self.values["train"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid [train] settings: {exc}") from exc

    def generation_config(self) -> GenerationConfig:
        try:
            return GenerationConfig(**self.values["generation"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid [generation] settings: {exc}") from exc

    def to_dict(self) -> dict:
        return copy.deepcopy(self.values)

    def dumps(self) -> str:
        return json.dumps(self.values, sort_keys=True, indent=2) + "\n"

    def save(self, run_dir) -> Path:
        path = Path(run_dir) / CONFIG_FILENAME
        path.write_text(self.dumps(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "RunConfig":
        """Reload a ``config.json`` written by :meth:`save`."""
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def __repr__(self):
        return f"RunConfig({self.values!r})"


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc


def resolve_config(
    path=None,
    environ: Optional[Mapping[str, str]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Merge defaults, the TOML file at ``path``, ``MUSE_*`` variables and
    dotted-key ``overrides`` (highest precedence)."""
    values = DEFAULTS
    if path is not None:
        values = merge(values, load_toml(path), str(path))
    values = merge(values, env_layer(os.environ if environ is None else environ), "environment")
    if overrides:
        values = merge(values, dotted_to_nested(overrides), "command line")
    return RunConfig(values)
