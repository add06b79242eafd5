"""Sectioned key-value experiment configs.

Files are INI-style (``configparser``).  Every section maps onto one
dataclass; keys that are not fields of that dataclass are rejected so typos
fail loudly.  Values are parsed as Python literals where possible
(``0.1``, ``(0.1, 0.3)``, ``True``) and kept as strings otherwise.
"""

from __future__ import annotations

import ast
import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .bilevel import EstimatorConfig
from .lowlight.tasks import HeadTrainConfig, PipelineConfig


class ConfigError(ValueError):
    """Malformed, unknown or out-of-range configuration."""


@dataclass
class RunSection:
    seeds: tuple[int, ...] = (1, 2, 3)
    data_seed: int = 0
    init_seed: int = 0
    dataset: str = ""
    figures: bool = True


@dataclass
class CompareSection:
    strategies: tuple[str, ...] = ("naive", "tbgl", "ibgl")
    outer_steps: int = 300
    ibgl_k: int = 80
    batch_size: int = 2
    warm_steps: int = 0
    warm_lr: float = 1e-4
    upper_lr_init: float = 3e-3
    upper_lr_final: float = 5e-6
    lower_lr_init: float = 3e-3
    lower_lr_final: float = 3e-5
    schedule: str = "cosine"
    upper_optimizer: str = "adam"
    lower_optimizer: str = "sgd"
    upper_clip: float = 10.0
    log_every: int = 10
    fixed_gb_baseline: bool = True


@dataclass
class VerifySection:
    seeds: tuple[int, ...] = tuple(range(10))
    m: int = 5
    n: int = 5
    unroll_k: int = 200
    gamma: float = 0.5
    deltas: tuple[float, ...] = (1e-1, 5e-2, 2.5e-2, 1.25e-2, 6.25e-3, 3.125e-3, 1.5625e-3)
    k_sweep: tuple[int, ...] = (1, 2, 5, 10, 20, 50, 100, 200)
    scales: tuple[float, ...] = (0.1, 1.0, 7.0, 100.0)
    oracle_tol: float = 1e-5
    exact_tol: float = 1e-8
    order_band: tuple[float, float] = (3.5, 4.5)
    invariance_tol: float = 1e-12
    cosine_tol: float = 1e-10


@dataclass
class TransferSection:
    checkpoints: str = ""
    strategies: tuple[str, ...] = ("naive", "ibgl")
    data_seed: int = 1


SECTIONS: dict[str, type] = {
    "run": RunSection,
    "pipeline": PipelineConfig,
    "compare": CompareSection,
    "estimator": EstimatorConfig,
    "head": HeadTrainConfig,
    "verify": VerifySection,
    "transfer": TransferSection,
}


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    compare: CompareSection = field(default_factory=CompareSection)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    head: HeadTrainConfig = field(default_factory=HeadTrainConfig)
    verify: VerifySection = field(default_factory=VerifySection)
    transfer: TransferSection = field(default_factory=TransferSection)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {name: _plain(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}

    def hash(self) -> str:
        """Short digest of the canonical JSON form; independent of file formatting."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def dumps(self) -> str:
        parts = []
        for name, values in self.to_dict().items():
            parts.append(f"[{name}]")
            parts += [f"{k} = {_literal(v)}" for k, v in values.items()]
            parts.append("")
        return "\n".join(parts)


def _plain(obj):
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def _literal(v) -> str:
    if isinstance(v, list):
        return repr(tuple(v)) if len(v) != 1 else f"({v[0]!r},)"
    if isinstance(v, str):
        return v
    return repr(v)


def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        pass
    if "," in raw:
        return tuple(_parse_value(p) for p in raw.split(",") if p.strip())
    return raw


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    if isinstance(default, tuple):
        return tuple(value) if isinstance(value, (list, tuple)) else (value,)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"[{section}] {key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"[{section}] {key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"[{section}] {key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        return str(value)
    return value


def _build(section: str, cls: type, values: dict[str, str]):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls()
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    kwargs = {}
    for key, raw in values.items():
        value = _parse_value(raw)
        if isinstance(value, str) and value.lower() in ("true", "false"):
            value = value.lower() == "true"
        kwargs[key] = _coerce(section, key, value, getattr(defaults, key))
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    unknown = sorted(set(parser.sections()) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    built = {name: _build(name, cls, dict(parser[name])) for name, cls in SECTIONS.items() if parser.has_section(name)}
    return ExperimentConfig(**built)


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read a config file; ``None`` gives all defaults."""
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def with_seed(cfg: ExperimentConfig, seed: int | None, data: bool = False) -> ExperimentConfig:
    """``--seed`` override: replaces the run seeds, or the data seed when ``data``."""
    if seed is None:
        return cfg
    if not 0 <= seed < 2 ** 64:
        raise ConfigError(f"seed must fit in u64, got {seed}")
    run = dataclasses.replace(cfg.run, data_seed=seed) if data else dataclasses.replace(cfg.run, seeds=(seed,))
    return dataclasses.replace(cfg, run=run)
