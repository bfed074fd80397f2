"""Experiment configuration and the flat ``key = value`` config file format.

Keys are ``section.name``; see README for the full list.  Blank lines and
lines starting with ``#`` are ignored.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .moe import ConfigError, ExpertConfig, Variant


@dataclass(frozen=True)
class DatasetParams:
    n_samples: int = 2048
    d_h: int = 48
    n_tasks: int = 3
    sigma: float = 0.05
    d_out: int = 4
    val_fraction: float = 0.25
    perturbation: float = 0.1


@dataclass(frozen=True)
class ModelParams:
    d_in: int = 32
    depth: int = 4
    backbone_lora: bool = True
    init_scale: float = 0.02  # std of expert A matrices


@dataclass(frozen=True)
class ExpertParams:
    n: int = 16
    k: int = 3
    s: int = 1
    rank: int = 4
    variant: str = "ase"


@dataclass(frozen=True)
class TrainParams:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.2
    stl_epochs: int = 30
    stl_lr: float = 0.2


@dataclass(frozen=True)
class LossParams:
    mi_weight: float = 0.01
    mi_per_layer: bool = True


@dataclass(frozen=True)
class SuiteParams:
    seeds: int = 3


@dataclass(frozen=True)
class OutputParams:
    dir: str = "runs"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetParams = field(default_factory=DatasetParams)
    model: ModelParams = field(default_factory=ModelParams)
    expert: ExpertParams = field(default_factory=ExpertParams)
    train: TrainParams = field(default_factory=TrainParams)
    loss: LossParams = field(default_factory=LossParams)
    suite: SuiteParams = field(default_factory=SuiteParams)
    output: OutputParams = field(default_factory=OutputParams)

    @property
    def variant(self) -> Variant:
        return Variant(self.expert.variant)

    @property
    def expert_config(self) -> ExpertConfig:
        e = self.expert
        return ExpertConfig(e.n, e.k, e.s, e.rank)

    def validate(self) -> ExperimentConfig:
        try:
            variant = self.variant
        except ValueError:
            raise ConfigError(f"unknown gating variant {self.expert.variant!r}") from None
        self.expert_config.validate(variant)
        if self.expert.rank >= self.model.d_in:
            raise ConfigError(f"rank {self.expert.rank} must be below width {self.model.d_in}")
        if self.train.epochs < 1 or self.train.stl_epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.train.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.train.lr <= 0 or self.train.stl_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.loss.mi_weight < 0:
            raise ConfigError("mi_weight must be nonnegative")
        if self.model.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.dataset.n_tasks < 2 or self.dataset.n_samples < 2:
            raise ConfigError("need n_tasks >= 2 and n_samples >= 2")
        if self.suite.seeds < 1:
            raise ConfigError("suite.seeds must be >= 1")
        return self

    def with_overrides(self, **flat) -> ExperimentConfig:
        """``with_overrides(**{"expert.k": 4, "seed": 3})``."""
        cfg = self
        for key, value in flat.items():
            cfg = _set(cfg, key, value)
        return cfg

    def to_flat(self) -> dict[str, object]:
        out: dict[str, object] = {"seed": self.seed}
        for f in dataclasses.fields(self):
            if f.name == "seed":
                continue
            section = getattr(self, f.name)
            for sf in dataclasses.fields(section):
                out[f"{f.name}.{sf.name}"] = getattr(section, sf.name)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_render(v)}\n" for k, v in self.to_flat().items())


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw, typ: str, key: str):
    if typ == "bool" and isinstance(raw, str):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if typ == "int":
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "bool":
            return bool(raw)
        return str(raw).strip()
    except ValueError:
        raise ConfigError(f"{key}: expected {typ}, got {raw!r}") from None


def _set(cfg: ExperimentConfig, key: str, raw) -> ExperimentConfig:
    if key == "seed":
        return dataclasses.replace(cfg, seed=_coerce(raw, "int", key))
    section, _, name = key.partition(".")
    fields = {f.name: f for f in dataclasses.fields(cfg)}
    if section not in fields or section == "seed" or not name:
        raise ConfigError(f"unknown config key {key!r}")
    sub = getattr(cfg, section)
    sub_fields = {f.name: f for f in dataclasses.fields(sub)}
    if name not in sub_fields:
        raise ConfigError(f"unknown config key {key!r}")
    value = _coerce(raw, str(sub_fields[name].type), key)
    return dataclasses.replace(cfg, **{section: dataclasses.replace(sub, **{name: value})})


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        try:
            cfg = _set(cfg, key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return cfg.validate()


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))
