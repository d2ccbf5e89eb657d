"""Run configuration: YAML on disk, strict dataclasses in memory.

Unknown keys are rejected at every level, so a typo never silently falls
back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .env import ConfigError, EnvConfig
from .evaluation import EvalConfig
from .policies import VARIANTS, AdapterConfig, PolicyConfig
from .training import TrainConfig

SCHEMA_VERSION = 1
ABLATION_VARIANTS = ("mlp", "summary", "belief", "belief_gated", "belief_privileged")


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation_variants: tuple[str, ...] = ABLATION_VARIANTS
    out_dir: str = "runs"

    @property
    def env(self) -> EnvConfig:
        return self.train.env

    @property
    def policy(self) -> PolicyConfig:
        return self.train.policy

    @property
    def seeds(self) -> tuple[int, ...]:
        return self.train.seeds

    def validate(self) -> RunConfig:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {self.schema_version}")
        self.train.validate()
        self.eval.validate(self.train.env)
        for v in self.ablation_variants:
            if v not in VARIANTS:
                raise ConfigError(f"ablation_variants: unknown variant {v!r}")
        return self

    def to_dict(self) -> dict:
        return _to_plain(self)

    def config_hash(self) -> str:
        # out_dir does not change results.
        d = self.to_dict()
        d.pop("out_dir", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_variant(self, variant: str) -> RunConfig:
        pol = dataclasses.replace(self.train.policy, variant=variant)
        return dataclasses.replace(self, train=dataclasses.replace(self.train, policy=pol))


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(x) for x in obj]
    return obj


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown field(s) {', '.join(unknown)}")
    kwargs = {}
    for name, raw in data.items():
        kwargs[name] = _coerce(hints[name], raw, f"{path}.{name}" if path else name)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def _coerce(tp, raw, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, raw, path)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw is None:
            return None
        return _coerce(args[0], raw, path)
    if origin is tuple:
        if not isinstance(raw, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = typing.get_args(tp)
        elem = args[0]
        return tuple(_coerce(elem, x, f"{path}[{i}]") for i, x in enumerate(raw))
    if tp is bool:
        if not isinstance(raw, bool):
            raise ConfigError(f"{path}: expected true/false, got {raw!r}")
        return raw
    if tp is int:
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise ConfigError(f"{path}: expected an integer, got {raw!r}")
        return raw
    if tp is float:
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {raw!r}")
        return float(raw)
    if tp is str:
        if not isinstance(raw, str):
            raise ConfigError(f"{path}: expected a string, got {raw!r}")
        return raw
    raise ConfigError(f"{path}: unsupported field type {tp}")


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data or {}, "").validate()


def load_config(path: Path | str | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return from_dict(data or {})


def dump_config(cfg: RunConfig, path: Path | str) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply dotted ``key=value`` overrides, e.g. ``train.opt_steps=5``.

    Values are parsed as YAML scalars, then validated like the file itself.
    """
    data = cfg.to_dict()
    for item in overrides:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r}: expected key=value")
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"override {item!r}: unknown section {p!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"override {item!r}: unknown field {key!r}")
        node[parts[-1]] = yaml.safe_load(val)
    return from_dict(data)


__all__ = [
    "RunConfig",
    "EnvConfig",
    "TrainConfig",
    "EvalConfig",
    "PolicyConfig",
    "AdapterConfig",
    "ConfigError",
    "load_config",
    "dump_config",
    "apply_overrides",
    "from_dict",
]
