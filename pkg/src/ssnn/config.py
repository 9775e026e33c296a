"""Flat ``section.key = value`` configuration with typed sections.

Lines starting with ``#`` are comments.  Flag overrides (``--set``) are
applied after the file, so they win.  Unknown sections or keys are usage
errors that list what is valid.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import PendulumConfig
from .errors import ContractViolation, UsageError
from .training import TrainConfig


@dataclass
class SyntheticConfig:
    """Ground-truth segment model used by ``gen-data --kind ssnn``."""
    K: int = 3
    M: int = 10
    m: int = 2
    h: int = 8
    count: int = 40
    T: int = 200
    separation: float = 4.0
    min_duration: int = 5


@dataclass
class PendulumSetConfig:
    count: int = 50


@dataclass
class EvalConfig:
    samples: int = 100
    tau: float = 1.0


SECTIONS = {
    "train": TrainConfig,
    "pendulum": PendulumConfig,
    "pendulum_set": PendulumSetConfig,
    "ssnn": SyntheticConfig,
    "eval": EvalConfig,
}


@dataclass
class CliConfig:
    values: dict = field(default_factory=lambda: {s: {} for s in SECTIONS})

    def section(self, name: str):
        """Instantiate the section's dataclass from defaults plus set values."""
        try:
            return SECTIONS[name](**self.values[name])
        except (TypeError, ContractViolation) as exc:
            raise UsageError(f"invalid [{name}] settings: {exc}") from None


def valid_keys() -> list[str]:
    return [f"{s}.{f.name}" for s, cls in SECTIONS.items() for f in dataclasses.fields(cls)]


def _field_type(section: str, key: str):
    cls = SECTIONS[section]
    hints = typing.get_type_hints(cls)
    return hints[key]


def _convert(raw: str, typ, where: str):
    raw = raw.strip()
    args = typing.get_args(typ)
    optional = type(None) in args
    if optional:
        if raw.lower() in ("none", "null", ""):
            return None
        typ = next(a for a in args if a is not type(None))
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw.strip('"').strip("'")
    except ValueError:
        raise UsageError(f"{where}: cannot read {raw!r} as {getattr(typ, '__name__', typ)}") from None


def apply(config: CliConfig, key: str, raw: str, where: str = "override") -> None:
    if "." not in key:
        raise UsageError(f"{where}: key {key!r} must look like section.key; valid keys: {', '.join(valid_keys())}")
    section, name = key.strip().split(".", 1)
    if section not in SECTIONS or name not in {f.name for f in dataclasses.fields(SECTIONS[section])}:
        raise UsageError(f"{where}: unknown key {key!r}; valid keys: {', '.join(valid_keys())}")
    config.values[section][name] = _convert(raw, _field_type(section, name), where)


def parse_text(text: str, source: str = "<config>", config: CliConfig | None = None) -> CliConfig:
    config = config or CliConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise UsageError(f"{source}:{lineno}: expected 'section.key = value', got {line.strip()!r}")
        key, raw = body.split("=", 1)
        apply(config, key.strip(), raw, f"{source}:{lineno}")
    return config


def load(path=None, overrides: list[str] | None = None) -> CliConfig:
    config = CliConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config file {path}: {exc}") from None
        parse_text(text, str(path), config)
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        apply(config, key.strip(), raw, f"--set {item}")
    return config
