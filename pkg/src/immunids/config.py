"""System configuration and its flat ``key = value`` file format.

Lines are ``key = value``; ``#`` starts a comment. Every key has a default, so
an empty file is valid. Precedence is defaults < file < environment
(``IMMUNIDS_<KEY>``) < command-line overrides.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

from .analyzer import AnalyzerConfig
from .errors import ConfigurationError, ParseError
from .traffic import BUILTIN_CHARACTERISTICS, Characteristic

ENV_PREFIX = "IMMUNIDS_"


@dataclass
class SystemConfig:
    characteristics: tuple[str, ...] = ("bytes_in_rate", "bytes_out_rate", "mean_duration")
    window_seconds: float = 1.0
    segment_len: int = 8
    innate_threshold: float = 0.8
    adaptive_threshold: float = 0.5
    pca_p: int | None = None
    pca_variance_target: float = 0.95
    standardize: bool = False
    model_kind: str = "tree"
    tree_max_depth: int | None = 8
    tree_min_samples_leaf: int = 1
    global_max_depth: int | None = 8
    global_min_samples_leaf: int = 1
    rule_min_accuracy: float = 0.9
    feedback_store_bound: int = 100_000
    timestamp_step: float = 1.0
    instance_id: str = "local"
    fragment_size: int = 512
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        self.characteristics = tuple(self.characteristics)
        if len(set(self.characteristics)) != len(self.characteristics):
            raise ConfigurationError("characteristic ids must be unique")
        for cid in self.characteristics:
            if cid not in BUILTIN_CHARACTERISTICS:
                raise ConfigurationError(f"unknown characteristic {cid!r}")
        for name in ("innate_threshold", "adaptive_threshold"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must lie in (0, 1)")
        if self.window_seconds <= 0:
            raise ConfigurationError("window_seconds must be positive")
        if self.segment_len < 2:
            raise ConfigurationError("segment_len must be at least 2")
        if self.pca_p is not None and self.pca_p < 1:
            raise ConfigurationError("pca_p must be positive")
        if not 0 < self.pca_variance_target <= 1:
            raise ConfigurationError("pca_variance_target must lie in (0, 1]")
        if self.model_kind not in ("tree", "rules"):
            raise ConfigurationError("model_kind must be 'tree' or 'rules'")
        if self.feedback_store_bound < 1:
            raise ConfigurationError("feedback_store_bound must be positive")
        if self.timestamp_step <= 0:
            raise ConfigurationError("timestamp_step must be positive")
        if self.fragment_size < 64:
            raise ConfigurationError("fragment_size must be at least 64 bytes")
        if not self.instance_id or any(ch.isspace() for ch in self.instance_id):
            raise ConfigurationError("instance_id must be a non-empty token")
        if self.threads < 1:
            raise ConfigurationError("threads must be positive")

    def characteristic_objects(self) -> list[Characteristic]:
        return [BUILTIN_CHARACTERISTICS[c] for c in self.characteristics]

    def analyzer_config(self) -> AnalyzerConfig:
        return AnalyzerConfig(self.model_kind, self.tree_max_depth, self.tree_min_samples_leaf,
                              self.global_max_depth, self.global_min_samples_leaf,
                              self.rule_min_accuracy, self.threads)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format_value(getattr(self, f.name))}\n"
                       for f in dataclasses.fields(self))


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


def _field_types() -> dict[str, str]:
    return {f.name: str(f.type) for f in dataclasses.fields(SystemConfig)}


def _coerce(key: str, raw: str):
    kind = _field_types()[key]
    raw = raw.strip()
    try:
        if "None" in kind and raw.lower() in ("none", "auto", ""):
            return None
        if kind.startswith("tuple"):
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        if kind.startswith("bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigurationError(f"invalid value {raw!r} for {key}") from None


def parse_config_text(text: str) -> dict:
    values = {}
    known = _field_types()
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected key = value", line_no)
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ParseError(f"unknown config key {key!r}", line_no)
        values[key] = _coerce(key, raw)
    return values


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for key in _field_types():
        name = ENV_PREFIX + key.upper()
        if name in environ:
            out[key] = _coerce(key, environ[name])
    return out


def build_config(text: str = "", environ=None, overrides: dict | None = None) -> SystemConfig:
    values = parse_config_text(text)
    values.update(env_overrides(environ))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        values[key] = _coerce(key, value) if isinstance(value, str) else value
    return SystemConfig(**values)


def config_from_text(text: str) -> SystemConfig:
    return SystemConfig(**parse_config_text(text))
