"""Pipeline configuration: nested dataclasses loaded from ``section.key = value`` files."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .asmof import AsmParams
from .cnn import AdamConfig, CnnConfig, TrainConfig
from .crf import CrfParams
from .grouping import HogParams
from .groupone import GroupOneParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SvmConfig:
    epochs: int = 400
    lr: float = 0.5
    reg: float = 1e-3
    window: int = 10

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or self.reg < 0 or self.window < 0:
            raise ValueError("svm settings must be positive (reg, window >= 0)")


@dataclass(frozen=True)
class TuneConfig:
    trials: int = 50
    slices: int = 4
    band: int = 5

    def __post_init__(self):
        if self.trials < 1 or self.slices < 1 or self.band < 0:
            raise ValueError("tune.trials and tune.slices must be >= 1, tune.band >= 0")


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (64, 64, 48)
    noise_sigma: float = 0.03
    skull_thickness: float = 3.0
    n_subjects: int = 10
    group_low: float = 0.5
    group_high: float = 0.85

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError("phantom.dims must be three positive integers")
        if self.noise_sigma < 0 or self.skull_thickness < 0 or self.n_subjects < 1:
            raise ValueError("phantom settings out of range")
        if not 0 < self.group_low < self.group_high <= 1:
            raise ValueError("phantom group thresholds must satisfy 0 < low < high <= 1")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    jobs: int = 1
    hog: HogParams = HogParams()
    svm: SvmConfig = SvmConfig()
    asm: AsmParams = AsmParams()
    cnn: CnnConfig = CnnConfig()
    train: TrainConfig = TrainConfig()
    adam: AdamConfig = AdamConfig()
    crf: CrfParams = CrfParams()
    tune: TuneConfig = TuneConfig()
    groupone: GroupOneParams = GroupOneParams()
    phantom: PhantomConfig = field(default_factory=PhantomConfig)

    def __post_init__(self):
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")


def _convert(raw: str, typ, key: str):
    origin = typing.get_origin(typ)
    try:
        if origin is tuple:
            inner = typing.get_args(typ)[0]
            return tuple(inner(p.strip()) for p in raw.split(",") if p.strip())
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def apply_overrides(cfg: PipelineConfig, pairs: dict[str, str]) -> PipelineConfig:
    """Set ``section.key`` (or top-level ``key``) entries from strings; unknown keys are errors."""
    top = _hints(PipelineConfig)
    updates: dict[str, dict] = {}
    top_updates = {}
    for key, raw in pairs.items():
        parts = key.split(".")
        if len(parts) == 1 and parts[0] in top and not dataclasses.is_dataclass(top[parts[0]]):
            top_updates[parts[0]] = _convert(raw, top[parts[0]], key)
            continue
        if len(parts) != 2 or parts[0] not in top or not dataclasses.is_dataclass(top[parts[0]]):
            raise ConfigError(f"unknown config key {key!r}")
        section, name = parts
        hints = _hints(top[section])
        if name not in hints or name.startswith("_"):
            raise ConfigError(f"unknown config key {key!r}")
        updates.setdefault(section, {})[name] = _convert(raw, hints[name], key)
    try:
        changes = dict(top_updates)
        for section, vals in updates.items():
            changes[section] = replace(getattr(cfg, section), **vals)
        return replace(cfg, **changes)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return apply_overrides(base or PipelineConfig(), pairs)


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    return parse_config(text)


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for g in fields(value):
                v = getattr(value, g.name)
                v = ", ".join(str(x) for x in v) if isinstance(v, tuple) else v
                lines.append(f"{f.name}.{g.name} = {v}")
        else:
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
