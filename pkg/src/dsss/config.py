"""Experiment configuration: typed fields, flat ``key=value`` text form, group table."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from typing import Any


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)
        self.line = line
        self.column = column


@dataclass(frozen=True)
class Components:
    depth: bool = False
    suppression: str | None = None  # "gcss" | "csss" | "chss"
    perturbation: str | None = None  # "rsm" | "imsf"
    alignment: bool = False


# columns of the ablation table: RGB, Depth, GCSS, CHSS, CSSS, RSM, IMSF, SAL
GROUPS: dict[str, Components] = {
    "A": Components(),
    "B": Components(depth=True),
    "C": Components(depth=True, suppression="gcss", perturbation="rsm"),
    "D": Components(depth=True, suppression="csss", perturbation="rsm"),
    "E": Components(depth=True, suppression="chss", perturbation="rsm"),
    "F": Components(depth=True, suppression="csss", perturbation="imsf"),
    "G": Components(depth=True, suppression="csss", perturbation="imsf", alignment=True),
}


@dataclass(frozen=True)
class ExperimentConfig:
    group: str = "G"
    K: int = 6
    beta: float = 0.1
    alpha: float = 20.0
    alpha_mode: str = "quantile"
    alpha_quantile: float = 0.9
    crop_size: int = 64
    lambda_mode: str = "item"
    eps: float = 1e-5
    rescale: bool = True
    detach_flow: bool = False
    detach_sensitivity: bool = False
    detach_sa_rgb: bool = False
    lr: float = 0.01
    momentum: float = 0.9
    poly_power: float = 0.9
    iterations: int = 2000
    batch: int = 4
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    groups: tuple[str, ...] = ("A", "B", "C", "D", "E", "F", "G")
    rgb_channels: tuple[int, ...] = (16, 32)
    depth_channels: tuple[int, ...] = (8, 16)
    decoder_channels: int = 32
    log_every: int = 50
    eval_batch: int = 10
    source: str = ""
    targets: tuple[str, ...] = ()
    checkpoint: str = ""

    def __post_init__(self):
        validate(self)

    @property
    def components(self) -> Components:
        return GROUPS[self.group]

    def replace(self, **changes: Any) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            lines.append(f"{f.name}={_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def validate(cfg: ExperimentConfig) -> None:
    if cfg.group not in GROUPS:
        raise ConfigError(f"group must be one of {sorted(GROUPS)}, got {cfg.group!r}")
    for g in cfg.groups:
        if g not in GROUPS:
            raise ConfigError(f"unknown group {g!r} in groups")
    if cfg.K < 2:
        raise ConfigError("K must be >= 2")
    if cfg.beta < 0:
        raise ConfigError("beta must be >= 0")
    if cfg.alpha_mode not in ("quantile", "fixed"):
        raise ConfigError("alpha_mode must be 'quantile' or 'fixed'")
    if not 0.0 <= cfg.alpha_quantile <= 1.0:
        raise ConfigError("alpha_quantile must lie in [0, 1]")
    if cfg.lambda_mode not in ("item", "batch", "channel"):
        raise ConfigError("lambda_mode must be item, batch or channel")
    if cfg.crop_size < 1 or cfg.batch < 1 or cfg.iterations < 0:
        raise ConfigError("crop_size and batch must be >= 1, iterations >= 0")
    if len(cfg.rgb_channels) != 2 or len(cfg.depth_channels) != 2:
        raise ConfigError("encoders take exactly two channel widths")


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_FIELD_TYPES = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(name: str, raw: str) -> Any:
    f = _FIELD_TYPES[name]
    default = f.default
    kind = type(default)
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is tuple:
        items = [s.strip() for s in raw.split(",") if s.strip()]
        elem = type(default[0]) if default else str
        return tuple(elem(s) for s in items)
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def parse_assignments(pairs: list[tuple[str, str, int, int]]) -> dict[str, Any]:
    """Coerce ``(key, value, line, column)`` tuples into typed field values."""
    out: dict[str, Any] = {}
    for key, value, line, col in pairs:
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}", line, col)
        try:
            out[key] = _coerce(key, value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", line, col + len(key) + 1) from None
    return out


def parse_text(text: str) -> dict[str, Any]:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0]
        if not stripped.strip():
            continue
        if "=" not in stripped:
            col = len(raw) - len(raw.lstrip()) + 1
            raise ConfigError("expected key=value", lineno, col)
        key, value = stripped.split("=", 1)
        col = len(key) - len(key.lstrip()) + 1
        key = key.strip()
        if not key:
            raise ConfigError("empty key", lineno, col)
        pairs.append((key, value, lineno, col))
    return parse_assignments(pairs)


def parse_override(item: str) -> tuple[str, str]:
    if "=" not in item:
        raise ConfigError(f"override must be key=value, got {item!r}")
    key, value = item.split("=", 1)
    return key.strip(), value


def load(text: str = "", overrides: list[str] | None = None) -> ExperimentConfig:
    """Build a config from file text, then apply ``--set`` overrides on top."""
    values = parse_text(text)
    pairs = []
    for i, item in enumerate(overrides or [], start=1):
        key, value = parse_override(item)
        pairs.append((key, value, i, 1))
    values.update(parse_assignments(pairs))
    try:
        return ExperimentConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
