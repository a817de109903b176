"""YAML run configuration with schema validation and error positions.

A run file looks like::

    method: rodos
    seeds: [0, 1, 2]
    preset: desk
    data: data/synth
    encoder: {hidden_dim: 64, num_layers: 2}
    adapter: adapter.yaml        # or an inline mapping
    train: {lr: 0.001}

``encoder``, ``reference``, ``adapter`` and ``moe`` accept either an
inline mapping or a path (relative to the file) to a YAML mapping.
Every error carries ``file:line:column``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .encoder import DESK_BASE, DESK_LARGE, EncoderConfig
from .lora import AdapterSpec
from .moe import MoEConfig
from .pipeline import METHODS, MethodSettings
from .training import PRESETS, TrainConfig, preset


class ConfigError(ValueError):
    """A configuration value failed validation; ``str()`` includes its position."""

    def __init__(self, message: str, source: str = "<config>", line: int | None = None, column: int | None = None):
        where = source if line is None else f"{source}:{line}:{column}"
        super().__init__(f"{where}: {message}")
        self.line, self.column = line, column


_INT, _FLOAT, _STR, _BOOL = "int", "float", "str", "bool"

_SECTIONS: dict[str, dict[str, Any]] = {
    "encoder": {f.name: (_FLOAT if f.name == "dropout" else _INT) for f in fields(EncoderConfig)},
    "reference": {f.name: (_FLOAT if f.name == "dropout" else _INT) for f in fields(EncoderConfig)},
    "adapter": {"rank": _INT, "alpha": _FLOAT, "dropout": _FLOAT, "targets": [_STR]},
    "moe": {"num_experts": _INT, "top_k": _INT, "expert_dim": _INT, "noisy": _BOOL, "load_balance": _FLOAT, "noise_at_eval": _BOOL},
    "train": {"lr": _FLOAT, "batch_size": _INT, "epochs": _INT, "weight_decay": _FLOAT, "beta1": _FLOAT, "beta2": _FLOAT, "eps": _FLOAT},
}

SCHEMA: dict[str, Any] = {
    "method": _STR,
    "seeds": [_INT],
    "preset": _STR,
    "data": _STR,
    "out": _STR,
    "jobs": _INT,
    "include_response": _BOOL,
    **{name: ("section", name) for name in _SECTIONS},
}


def _scalar(node: yaml.Node, kind: str, source: str):
    mark = node.start_mark
    if not isinstance(node, yaml.ScalarNode):
        raise ConfigError(f"expected a {kind}, got a {type(node).__name__[:-4].lower()}", source, mark.line + 1, mark.column + 1)
    value = yaml.safe_load(yaml.serialize(node))
    ok = {
        _INT: isinstance(value, int) and not isinstance(value, bool),
        _FLOAT: isinstance(value, (int, float)) and not isinstance(value, bool),
        _STR: isinstance(value, str),
        _BOOL: isinstance(value, bool),
    }[kind]
    if not ok:
        raise ConfigError(f"expected a {kind}, got {value!r}", source, mark.line + 1, mark.column + 1)
    return float(value) if kind == _FLOAT else value


def _value(node: yaml.Node, spec, source: str):
    if isinstance(spec, list):
        if not isinstance(node, yaml.SequenceNode):
            m = node.start_mark
            raise ConfigError(f"expected a list of {spec[0]}", source, m.line + 1, m.column + 1)
        return [_scalar(item, spec[0], source) for item in node.value]
    return _scalar(node, spec, source)


def _mapping(node: yaml.Node, schema: dict[str, Any], source: str, base: Path) -> dict[str, Any]:
    m = node.start_mark
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError("expected a mapping", source, m.line + 1, m.column + 1)
    out: dict[str, Any] = {}
    for key_node, val_node in node.value:
        key = key_node.value
        km = key_node.start_mark
        if key not in schema:
            raise ConfigError(f"unknown key {key!r}; expected one of {sorted(schema)}", source, km.line + 1, km.column + 1)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", source, km.line + 1, km.column + 1)
        spec = schema[key]
        if isinstance(spec, tuple):
            out[key] = _section(val_node, spec[1], source, base)
        else:
            out[key] = _value(val_node, spec, source)
    return out


def _section(node: yaml.Node, name: str, source: str, base: Path) -> dict[str, Any]:
    if isinstance(node, yaml.ScalarNode):
        path = base / _scalar(node, _STR, source)
        if not path.exists():
            m = node.start_mark
            raise ConfigError(f"{name} file not found: {path}", source, m.line + 1, m.column + 1)
        return _mapping(_compose(path), _SECTIONS[name], str(path), path.parent)
    return _mapping(node, _SECTIONS[name], source, base)


def _compose(path: Path) -> yaml.Node:
    try:
        node = yaml.compose(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", str(path),
                          mark.line + 1 if mark else None, mark.column + 1 if mark else None) from None
    if node is None:
        return yaml.MappingNode("tag:yaml.org,2002:map", [])
    return node


def parse_config(path: str | Path) -> dict[str, Any]:
    """Validate a run file against the schema and return plain values."""
    path = Path(path)
    if not path.exists():
        raise ConfigError("config file not found", str(path))
    root = _compose(path)
    values = _mapping(root, SCHEMA, str(path), path.parent)
    for key, allowed in (("method", list(METHODS)), ("preset", sorted(PRESETS))):
        if key in values and values[key] not in allowed:
            m = next(v for k, v in root.value if k.value == key).start_mark
            raise ConfigError(f"unknown {key} {values[key]!r}; expected one of {allowed}", str(path), m.line + 1, m.column + 1)
    if "data" in values:
        values["data"] = str((path.parent / values["data"]).resolve())
    return values


@dataclass
class RunConfig:
    method: str | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    preset: str = "desk"
    data: str | None = None
    out: str | None = None
    jobs: int = 1
    include_response: bool = False
    encoder: dict = field(default_factory=dict)
    reference: dict = field(default_factory=dict)
    adapter: dict = field(default_factory=dict)
    moe: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    @classmethod
    def build(cls, path: str | Path | None = None, **overrides) -> RunConfig:
        """File values first, then non-None ``overrides`` (command-line flags)."""
        values = parse_config(path) if path is not None else {}
        train = dict(values.get("train", {}))
        for key in ("lr", "batch_size", "epochs"):
            if overrides.get(key) is not None:
                train[key] = overrides.pop(key)
            overrides.pop(key, None)
        values.update({k: v for k, v in overrides.items() if v is not None})
        values["train"] = train
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.method is not None and self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {list(METHODS)}")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; expected one of {sorted(PRESETS)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.data is not None and not Path(self.data).is_dir():
            raise ConfigError(f"data directory not found: {self.data}")
        try:
            self.settings()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def settings(self) -> MethodSettings:
        adapter = dict(self.adapter)
        if "targets" in adapter:
            adapter["targets"] = tuple(adapter["targets"])
        train: TrainConfig = preset(self.preset)
        return MethodSettings(
            encoder=replace(DESK_BASE, **self.encoder),
            reference=replace(DESK_LARGE, **self.reference),
            moe=MoEConfig(**self.moe),
            adapter=AdapterSpec(**adapter),
            train=replace(train, **self.train),
            jobs=self.jobs,
            include_response=self.include_response,
        )
