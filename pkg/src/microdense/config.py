"""JSON run configuration: ``{"arch": ..., "train": ..., "synthetic": ..., "ablation": ...}``."""

from __future__ import annotations

import json
import os
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .ablation import AblationSpec
from .data import SyntheticSpec
from .planner import ArchConfig
from .trainer import TrainConfig

SECTIONS = {"arch": ArchConfig, "train": TrainConfig, "synthetic": SyntheticSpec, "ablation": AblationSpec}
SEED_ENV = "MICRODENSE_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    arch: ArchConfig
    train: TrainConfig
    synthetic: SyntheticSpec
    ablation: Optional[dict] = None


def _check_types(path: str, section: str, cls, values: dict) -> None:
    hints = typing.get_type_hints(cls)
    for f in fields(cls):
        if f.name not in values:
            continue
        v = values[f.name]
        hint = hints[f.name]
        origin = typing.get_origin(hint)
        allowed = typing.get_args(hint) if origin is typing.Union else (hint,)
        ok = False
        for a in allowed:
            a = typing.get_origin(a) or a
            if a is type(None) and v is None:
                ok = True
            elif a is float and isinstance(v, (int, float)) and not isinstance(v, bool):
                ok = True
            elif a is int and isinstance(v, int) and not isinstance(v, bool):
                ok = True
            elif a in (bool, str, list, dict) and isinstance(v, a):
                ok = True
        if not ok:
            raise ConfigError(f"{path}: field '{section}.{f.name}' has value {v!r}; expected {hint}")


def _section(path: str, doc: dict, name: str, cls):
    values = doc.get(name, {})
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: section '{name}' must be an object")
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"{path}: unknown field '{name}.{key}' (known: {sorted(known)})")
    _check_types(path, name, cls, values)
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: section '{name}': {e}") from e


def parse_config(text: str, path: str = "<config>") -> RunConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    for key in doc:
        if key not in SECTIONS:
            raise ConfigError(f"{path}: unknown section '{key}' (known: {sorted(SECTIONS)})")
    abl = doc.get("ablation")
    if abl is not None:
        known = {f.name for f in fields(AblationSpec)}
        for key in abl:
            if key not in known:
                raise ConfigError(f"{path}: unknown field 'ablation.{key}'")
        _check_types(path, "ablation", AblationSpec, abl)
    train = doc.get("train", {})
    if SEED_ENV in os.environ and isinstance(train, dict):
        train = dict(train, seed=int(os.environ[SEED_ENV]))
        doc = dict(doc, train=train)
    return RunConfig(
        arch=_section(path, doc, "arch", ArchConfig),
        train=_section(path, doc, "train", TrainConfig),
        synthetic=_section(path, doc, "synthetic", SyntheticSpec),
        ablation=abl,
    )


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config ({e.strerror})") from e
    return parse_config(text, str(path))


def dump_config(cfg: RunConfig) -> str:
    from dataclasses import asdict

    doc = {"arch": cfg.arch.to_dict(), "train": cfg.train.to_dict(), "synthetic": asdict(cfg.synthetic)}
    if cfg.ablation is not None:
        doc["ablation"] = cfg.ablation
    return json.dumps(doc, indent=2)
