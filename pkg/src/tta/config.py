"""Experiment configuration: strict JSON onto nested dataclasses.

Unknown keys and wrong types are rejected with the dotted path of the
offending field, e.g. ``finetune.lr: expected a number, got 'fast'``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .bench import ExperimentSetup
from .disentangle import GridSpec
from .models import ModelSpec
from .taskvec import DEFAULT_GRID, MixingConfig
from .tasks import ConfigError, SuiteConfig
from .training import PRETRAIN_CONFIG, TrainConfig


@dataclass(frozen=True)
class XiConfig:
    lo: float = -3.0
    hi: float = 3.0
    num: int = 20
    samples_per_task: int = 512

    def grid(self) -> GridSpec:
        return GridSpec(self.lo, self.hi, self.num)

    def __post_init__(self):
        self.grid()
        if self.samples_per_task < 1:
            raise ValueError("samples_per_task must be >= 1")


@dataclass(frozen=True)
class NtkConfig:
    points_per_task: int = 200
    weights: str = "finetuned"

    def __post_init__(self):
        if self.points_per_task < 1:
            raise ValueError("points_per_task must be >= 1")
        if self.weights not in ("finetuned", "pretrained"):
            raise ValueError("weights must be 'finetuned' or 'pretrained'")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    output_dir: str = "out"
    suite: SuiteConfig = SuiteConfig()
    model: ModelSpec = ModelSpec()
    pretrain: TrainConfig = PRETRAIN_CONFIG
    finetune: TrainConfig = TrainConfig()
    mixing: MixingConfig = field(default_factory=lambda: MixingConfig((), DEFAULT_GRID))
    xi: XiConfig = XiConfig()
    ntk: NtkConfig = NtkConfig()

    def setup(self) -> ExperimentSetup:
        return ExperimentSetup(self.model, self.suite, self.pretrain, self.finetune,
                               tuple(self.mixing.search_grid))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=int(seed))


def default_config(seed: int = 0) -> ExperimentConfig:
    return ExperimentConfig(seed=seed)


# ---------------------------------------------------------------------------
# conversion


def _describe(v) -> str:
    return repr(v) if not isinstance(v, (dict, list)) else type(v).__name__


def _convert(value, tp, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        last = None
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _convert(value, arg, path)
            except ConfigError as exc:
                last = exc
        raise last or ConfigError(f"{path}: unexpected null")
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {_describe(value)}")
        inner = args[0] if args else typing.Any
        return tuple(_convert(v, inner, f"{path}[{i}]") for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {_describe(value)}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {_describe(value)}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {_describe(value)}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {_describe(value)}")
        return value
    if tp is typing.Any:
        return value
    raise ConfigError(f"{path}: unsupported field type {tp}")


def _build(cls, data, path: str):
    where = path or "<root>"
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {_describe(data)}")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls) if f.init}
    for key in data:
        if key not in known:
            raise ConfigError(f"{path + '.' if path else ''}{key}: unknown key")
    kwargs = {}
    for name, f in known.items():
        sub = f"{path}.{name}" if path else name
        if name in data:
            kwargs[name] = _convert(data[name], hints[name], sub)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"{sub}: required field missing")
    try:
        return cls(**kwargs)
    except (ValueError, TypeError, ArithmeticError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}")
    return config_from_dict(data)


def config_to_dict(cfg) -> dict:
    """Plain JSON-ready dict of a (nested) config dataclass, defaults included."""
    def plain(v):
        if dataclasses.is_dataclass(v):
            return {f.name: plain(getattr(v, f.name)) for f in dataclasses.fields(v) if f.init}
        if isinstance(v, (tuple, list)):
            return [plain(x) for x in v]
        return v
    return plain(cfg)


def canonical_json(cfg) -> str:
    return json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))


def config_hash(cfg) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()
