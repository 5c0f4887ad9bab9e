"""Flat ``key = value`` configuration files and the effective pipeline config.

One setting per line; ``#`` starts a comment; blank lines are ignored.
Sectioned settings use dotted keys (``train.epochs = 30``,
``field.query = search_term``). Precedence is command-line flag, then
config file, then built-in default. The file named by ``RELSPLIT_CONFIG``
is used when no ``--config`` is given.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Mapping

from .corpus import DEFAULT_DELIMITER, FieldMap, SynthSpec, TaskKind
from .encode import FeaturizerConfig
from .errors import DataError
from .model import TrainConfig
from .splitkit import DEFAULT_K, DEFAULT_PREFIX_N

ENV_VAR = "RELSPLIT_CONFIG"


class ConfigError(DataError):
    pass


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_config(path: str | Path | None) -> dict[str, str]:
    """Settings from ``path``, or from ``$RELSPLIT_CONFIG`` when ``path`` is None."""
    if path is None:
        path = os.environ.get(ENV_VAR) or None
        if path is None:
            return {}
    p = Path(path)
    try:
        text = p.read_bytes().decode("utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file {p} does not exist") from None
    except UnicodeDecodeError:
        raise ConfigError(f"config file {p} is not UTF-8") from None
    return parse_config_text(text, str(p))


# ---------------------------------------------------------------------------
# value coercion

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _bool(v: str) -> bool:
    low = v.lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _opt_str(v: str) -> str | None:
    return v or None


def _opt_float(v: str) -> float | None:
    return None if v.lower() in ("", "none", "default") else float(v)


_TRAIN_TYPES: dict[str, Callable[[str], Any]] = {
    "optimizer": str, "learning_rate": _opt_float, "epochs": int, "batch_size": int, "seed": int,
    "l2": float, "beta1": float, "beta2": float, "eps": float, "weight_decay": float,
}
_FEATURIZER_TYPES = {"dims": int, "n_min": int, "n_max": int, "seed": int}
_SYNTH_TYPES = {"vocab_size": int, "n_languages": int, "n_category_roots": int, "records_per_task": int,
                "overlap": float, "label_noise": float, "positive_rate": float, "records_per_query": float}
_TOP_TYPES: dict[str, Callable[[str], Any]] = {
    "task": TaskKind.parse, "k": int, "prefix_n": int, "raw_query": _bool, "stratify": str,
    "restarts": int, "delimiter": str, "provider": str, "table": _opt_str, "cache": _opt_str,
    "fallback_identity": _bool, "threshold": float, "tune_threshold": _bool, "seed": int,
}
_SECTIONS = {"train": _TRAIN_TYPES, "stage1": _TRAIN_TYPES, "stage2": _TRAIN_TYPES,
             "featurizer": _FEATURIZER_TYPES, "synth": _SYNTH_TYPES,
             "field": {f.name: str for f in fields(FieldMap)}}


def known_key(key: str) -> bool:
    section, dot, name = key.partition(".")
    if not dot:
        return key in _TOP_TYPES
    return name in _SECTIONS.get(section, {})


def _coerce(key: str, value: Any) -> Any:
    if not isinstance(value, str):
        return value
    section, dot, name = key.partition(".")
    conv = _SECTIONS[section][name] if dot else _TOP_TYPES[key]
    try:
        return conv(value)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from None


# ---------------------------------------------------------------------------
# effective config

@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the pipeline, after merging defaults, file and flags."""

    task: TaskKind | None = None
    k: int = DEFAULT_K
    prefix_n: int = DEFAULT_PREFIX_N
    raw_query: bool = False
    stratify: str = "joint"
    restarts: int = 0
    delimiter: str = DEFAULT_DELIMITER
    featurizer: FeaturizerConfig = FeaturizerConfig()
    provider: str = "identity"
    table: str | None = None
    cache: str | None = None
    fallback_identity: bool = False
    fields: FieldMap = FieldMap()
    train: TrainConfig = TrainConfig()
    stage1: TrainConfig = TrainConfig()
    stage2: TrainConfig = TrainConfig()
    threshold: float = 0.5
    tune_threshold: bool = False
    seed: int = 0
    synth: SynthSpec = SynthSpec()
    paths: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def build(cls, file_values: Mapping[str, str] | None = None,
              overrides: Mapping[str, Any] | None = None,
              paths: Mapping[str, str | None] | None = None) -> "PipelineConfig":
        """Merge file settings and flag overrides (flags win) over the defaults.

        ``overrides`` values may be strings or already-typed values; None
        entries mean "flag not given" and are skipped.
        """
        merged: dict[str, Any] = {}
        for source in (file_values or {}, overrides or {}):
            for key, value in source.items():
                if value is None:
                    continue
                if not known_key(key):
                    raise ConfigError(f"unknown config key {key!r}")
                merged[key] = _coerce(key, value)

        top = {k: v for k, v in merged.items() if "." not in k}
        sections: dict[str, dict[str, Any]] = {}
        for key, value in merged.items():
            if "." in key:
                section, _, name = key.partition(".")
                sections.setdefault(section, {})[name] = value
        try:
            base = cls()
            cfg = replace(
                base,
                **top,
                featurizer=replace(base.featurizer, **sections.get("featurizer", {})),
                fields=replace(base.fields, **sections.get("field", {})),
                train=TrainConfig(**sections.get("train", {})),
                stage1=TrainConfig(**sections.get("stage1", {})),
                stage2=TrainConfig(**sections.get("stage2", {})),
                synth=replace(base.synth, **sections.get("synth", {})),
                paths={k: str(v) for k, v in (paths or {}).items() if v is not None},
            )
        except ValueError as exc:
            raise ConfigError(f"invalid configuration: {exc}") from None
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.k < 2:
            raise ConfigError("k must be >= 2")
        if self.prefix_n < 1:
            raise ConfigError("prefix_n must be >= 1")
        if self.stratify not in ("joint", "marginal"):
            raise ConfigError("stratify must be 'joint' or 'marginal'")
        if self.restarts < 0:
            raise ConfigError("restarts must be >= 0")
        if not self.delimiter.strip():
            raise ConfigError("delimiter must contain a non-whitespace character")
        if self.provider not in ("identity", "table"):
            raise ConfigError("provider must be 'identity' or 'table'")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must be in (0, 1)")
        self.synth.validate()
        for role, p in self.paths.items():
            if role.startswith("in") and not Path(p).exists():
                raise ConfigError(f"input file {p} does not exist")
        if self.provider == "table" and self.table and not Path(self.table).exists():
            raise ConfigError(f"translation table {self.table} does not exist")

    def to_obj(self) -> dict[str, Any]:
        """Flat key -> value view, the form echoed into reports."""
        out: dict[str, Any] = {}
        for name in _TOP_TYPES:
            value = getattr(self, name)
            out[name] = value.value if isinstance(value, TaskKind) else value
        for section, obj in (("featurizer", self.featurizer), ("field", self.fields), ("train", self.train),
                             ("stage1", self.stage1), ("stage2", self.stage2), ("synth", self.synth)):
            for f in fields(obj):
                out[f"{section}.{f.name}"] = getattr(obj, f.name)
        for role, p in sorted(self.paths.items()):
            out[f"path.{role}"] = p
        return out
