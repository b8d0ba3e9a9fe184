"""Run configuration: defaults < config file (TOML) < ``ACTIONSENSE_*`` env < flags.

Seed fan-out: one global seed feeds every random stage through
``derive_seed(seed, stage)``, which hashes ``[seed, counter]`` with
:class:`numpy.random.SeedSequence`. Counters: split=0, init=1, train=2.
"""

from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from ._toml import loads as toml_loads
from .dataset import DEFAULT_RATIOS
from .errors import ConfigError, IoError
from .framepipe import DEFAULT_DECODER, DEFAULT_FPS, DEFAULT_PROBE
from .mlp import DEFAULT_DROPOUT, DEFAULT_HIDDEN_WIDTHS

ENV_PREFIX = "ACTIONSENSE_"
SEED_STAGES = {"split": 0, "init": 1, "train": 2}
RUN_CONFIG_FILE = "run-config.json"


def derive_seed(seed: int, stage: str) -> int:
    counter = SEED_STAGES[stage]
    state = np.random.SeedSequence([int(seed), counter]).generate_state(1, np.uint64)[0]
    return int(state)


@dataclass(frozen=True)
class RunConfig:
    # [dataset]
    manifest: str = "manifest.jsonl"
    ratios: tuple[float, float, float] = DEFAULT_RATIOS
    fps: int = DEFAULT_FPS
    decoder: str = DEFAULT_DECODER
    probe: str = DEFAULT_PROBE
    decode_width: int | None = None
    decode_height: int | None = None
    # [backbone]
    backbone: str = "stub"
    registry: str | None = None
    features: str = "features"
    workers: int = os.cpu_count() or 1
    # [head]
    hidden_widths: tuple[int, int, int, int] = DEFAULT_HIDDEN_WIDTHS
    dropout_rate: float = DEFAULT_DROPOUT
    # [train]
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    patience: int = 10
    optimizer: str = "adam"
    model: str = "model"
    # [eval]
    format: str = "text"
    report_dir: str = "reports"
    # global
    seed: int = 0

    def to_json(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def write(self, directory: str | Path) -> None:
        path = Path(directory) / RUN_CONFIG_FILE
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from exc


SECTIONS = {
    "dataset": ("manifest", "ratios", "fps", "decoder", "probe", "decode_width", "decode_height"),
    "backbone": ("backbone", "registry", "features", "workers"),
    "head": ("hidden_widths", "dropout_rate"),
    "train": ("epochs", "batch_size", "lr", "patience", "optimizer", "model"),
    "eval": ("format", "report_dir"),
}
# Keys a config section may use that differ from the field name.
SECTION_ALIASES = {("backbone", "name"): "backbone"}
PATH_FIELDS = {"manifest", "registry", "features", "model", "report_dir"}
_HINTS = typing.get_type_hints(RunConfig)


def _coerce(name: str, value: Any) -> Any:
    hint = _HINTS[name]
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if value is None:
        return None
    try:
        if origin is tuple:
            if isinstance(value, str):
                value = [v for v in value.replace(" ", "").split(",") if v]
            return tuple(args[0](v) for v in value)
        if origin in (typing.Union, types.UnionType):
            inner = next(a for a in args if a is not type(None))
            if isinstance(value, str) and value.lower() in ("", "none", "null"):
                return None
            return inner(value)
        if hint is bool:
            return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
        return hint(value)
    except (TypeError, ValueError):
        raise ConfigError(f"cannot interpret {value!r} for setting {name!r}") from None


def _validate(cfg: RunConfig) -> RunConfig:
    if len(cfg.ratios) != 3:
        raise ConfigError(f"ratios needs three values, got {cfg.ratios}")
    if len(cfg.hidden_widths) != 4:
        raise ConfigError(f"hidden_widths needs four values, got {cfg.hidden_widths}")
    if cfg.fps <= 0 or cfg.workers <= 0:
        raise ConfigError("fps and workers must be positive")
    if cfg.seed < 0 or cfg.seed >= 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if cfg.format not in ("text", "json"):
        raise ConfigError(f"format must be text or json, got {cfg.format!r}")
    return cfg


def _from_file(path: Path) -> dict:
    try:
        data = toml_loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read config file {path}: {exc}") from exc
    known = {f.name for f in fields(RunConfig)}
    out: dict[str, Any] = {}
    for key, value in data.items():
        if isinstance(value, dict):
            if key not in SECTIONS:
                raise ConfigError(f"{path}: unknown section [{key}]")
            for sub, v in value.items():
                name = SECTION_ALIASES.get((key, sub), sub)
                if name not in SECTIONS[key] and name not in known:
                    raise ConfigError(f"{path}: unknown setting {sub!r} in [{key}]")
                out[name] = v
        elif key in known:
            out[key] = value
        else:
            raise ConfigError(f"{path}: unknown setting {key!r}")
    for name in PATH_FIELDS & out.keys():
        if out[name] is not None and not Path(out[name]).is_absolute():
            out[name] = str(path.parent / out[name])
    return out


def _from_env(env: Mapping[str, str]) -> dict:
    out = {}
    for f in fields(RunConfig):
        key = ENV_PREFIX + f.name.upper()
        if key in env:
            out[f.name] = env[key]
    return out


def resolve(
    flags: Mapping[str, Any] | None = None,
    config_path: str | Path | None = None,
    env: Mapping[str, str] | None = None,
) -> RunConfig:
    """Merge every configuration layer into a validated :class:`RunConfig`.

    ``flags`` maps field names to values; ``None`` values mean "not given".
    The config file may also be named by ``ACTIONSENSE_CONFIG``.
    """
    env = os.environ if env is None else env
    layers: dict[str, Any] = {}
    config_path = config_path or env.get(ENV_PREFIX + "CONFIG")
    if config_path:
        layers.update(_from_file(Path(config_path)))
    layers.update(_from_env(env))
    layers.update({k: v for k, v in (flags or {}).items() if v is not None})
    values = {k: _coerce(k, v) for k, v in layers.items()}
    return _validate(dataclasses.replace(RunConfig(), **values))
