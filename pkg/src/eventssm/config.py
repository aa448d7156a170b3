"""Run configuration: defaults < JSON file < ``section.key=value`` overrides.

Every key has a default (``model.num_channels`` / ``model.num_classes`` may
stay ``null`` and are then inferred from the dataset). Unknown keys are
rejected with the offending dotted path in the message.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Iterable

from .events import SynthConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _defaults() -> dict:
    # raw field defaults, so scalar pooling/width_mult follow num_layers
    model = {f.name: list(f.default) if isinstance(f.default, tuple) else f.default
             for f in fields(ModelConfig)}
    model["num_channels"] = model["num_classes"] = None
    synth = asdict(SynthConfig())
    synth["interval_means_us"] = list(synth["interval_means_us"])
    synth["seed"] = 0
    return {
        "model": model,
        "train": TrainConfig().to_dict(),
        "data": {"root": None, "train_split": "train", "select_on_test": False},
        "run": {"out_dir": "runs/default"},
        "synth": synth,
    }


DEFAULTS = _defaults()


def parse_value(text: str) -> Any:
    """JSON literal if it parses (``3``, ``1e-3``, ``true``, ``[1,2]``,
    ``null``), else the raw string (``async``)."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {path}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path} must be a table")
            _merge(base[key], value, path + ".")
        else:
            base[key] = value


def apply_override(cfg: dict, item: str) -> None:
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override must look like section.key=value, got {item!r}")
    *parents, leaf = key.strip().split(".")
    node, walked = cfg, []
    for part in parents:
        walked.append(part)
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config key: {'.'.join(walked)}")
        node = node[part]
    if leaf not in node or isinstance(node[leaf], dict):
        raise ConfigError(f"unknown config key: {key.strip()}")
    node[leaf] = parse_value(raw.strip())


@dataclass
class RunConfig:
    model: dict
    train: dict
    data: dict
    run: dict
    synth: dict

    @classmethod
    def load(cls, path: str | os.PathLike | None = None, overrides: Iterable[str] = ()) -> RunConfig:
        cfg = copy.deepcopy(DEFAULTS)
        if path is not None:
            try:
                loaded = json.loads(Path(path).read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {path}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
            if not isinstance(loaded, dict):
                raise ConfigError(f"{path}: top level must be an object")
            _merge(cfg, loaded)
        for item in overrides:
            apply_override(cfg, item)
        out = cls(**cfg)
        out.train_config()  # validate early
        return out

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        cfg = copy.deepcopy(DEFAULTS)
        _merge(cfg, d)
        return cls(**cfg)

    def to_dict(self) -> dict:
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}

    def echo(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def model_config(self, num_channels: int | None = None, num_classes: int | None = None) -> ModelConfig:
        """Build the model config, filling inferred sizes where the config
        leaves them ``null``; explicit values must agree with the data."""
        m = dict(self.model)
        for key, found in (("num_channels", num_channels), ("num_classes", num_classes)):
            if m[key] is None:
                if found is None:
                    raise ConfigError(f"model.{key} is not set and cannot be inferred")
                m[key] = found
            elif found is not None and key == "num_channels" and m[key] != found:
                raise ConfigError(f"model.num_channels={m[key]} but the data has J={found}")
        try:
            return ModelConfig(**m)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model config: {exc}") from None

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**self.train)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid train config: {exc}") from None

    def synth_config(self) -> tuple[SynthConfig, int]:
        s = dict(self.synth)
        seed = s.pop("seed")
        try:
            return SynthConfig(**s), int(seed)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid synth config: {exc}") from None
