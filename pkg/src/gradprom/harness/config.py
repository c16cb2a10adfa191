"""Sectioned ``key = value`` experiment configuration.

Keys are written either under a ``[section]`` header or fully dotted
(``strategy.lambda = 1e-4``). Every field has a default, so an empty file is a
valid configuration. Unknown keys and invalid values are hard errors.
"""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..engine import GATE_MODES, STRATEGIES, SUPERVISION, OptimConfig, StrategyConfig
from ..models import ModelConfig, classifier_config, enhancer_config, segmenter_config
from ..synthdata import DegradeConfig, SceneConfig, parse_degrade, scene_distribution


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


def _opt(default, key=None, choices=None, kind=None):
    meta = {}
    if key:
        meta["key"] = key
    if choices:
        meta["choices"] = choices
    if kind:
        meta["kind"] = kind
    if isinstance(default, list):
        return field(default_factory=lambda: list(default), metadata=meta)
    return field(default=default, metadata=meta)


@dataclass
class DatasetSection:
    seed: int = 0
    n_train: int = 512
    n_eval: int = 128
    height: int = 32
    width: int = 32
    channels: int = 1
    distribution: str = _opt("A", choices=("A", "B"))
    eval_distribution: str = _opt("", choices=("", "A", "B"))
    degrade: str = "gaussian(0.1)"
    augment: bool = True
    crop: bool = False


@dataclass
class ModelSection:
    enhancer_channels: int = 16
    enhancer_depth: int = 3
    recognizer: str = _opt("classifier", choices=("classifier", "segmenter", "both"))
    recognizer_channels: int = 16
    n_classes: int = 3
    seg_classes: int = 2


@dataclass
class StrategySection:
    kind: str = _opt("gradprom", choices=STRATEGIES)
    gate_mode: str = _opt("hard", choices=GATE_MODES)
    supervision: str = _opt("supervised", choices=SUPERVISION)
    lam: float = _opt(1e-4, key="lambda")
    warmup_epochs: int = 1
    vr_pretrain_epochs: int = 2
    update_vr_params: bool = True


@dataclass
class OptimSection:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    pretrain_lr: float = 1e-3


@dataclass
class RunSection:
    epochs: int = 30
    eval_interval: int = 5
    out_dir: str = "runs/experiment"
    seeds: list = _opt([0, 1, 2, 3, 4], kind=int)


@dataclass
class GridSection:
    strategies: list = _opt(["joint", "frozen", "gradprom"], kind=str)
    supervision: list = _opt(["unsupervised", "supervised"], kind=str)
    gate_modes: list = _opt(["hard"], kind=str)
    sigmas: list = _opt([0.05, 0.1, 0.2, 0.3], kind=float)
    sr_factors: list = _opt([2, 4], kind=int)
    composite: bool = True
    cross_distribution: bool = True
    multi_aux: bool = True
    baselines: bool = False


SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "strategy": StrategySection,
    "optim": OptimSection,
    "run": RunSection,
    "grid": GridSection,
}


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    strategy: StrategySection = field(default_factory=StrategySection)
    optim: OptimSection = field(default_factory=OptimSection)
    run: RunSection = field(default_factory=RunSection)
    grid: GridSection = field(default_factory=GridSection)

    # ---- derived engine objects

    def degradation(self) -> DegradeConfig:
        return parse_degrade(self.dataset.degrade)

    @property
    def task(self) -> str:
        return "sr" if self.degradation().scale_factor > 1 else "denoise"

    def scene(self, which: str = "train") -> SceneConfig:
        name = self.dataset.distribution
        if which == "eval" and self.dataset.eval_distribution:
            name = self.dataset.eval_distribution
        return scene_distribution(name, height=self.dataset.height, width=self.dataset.width,
                                  channels=self.dataset.channels)

    def enhancer(self) -> ModelConfig:
        return enhancer_config(self.task, channels=self.model.enhancer_channels,
                               depth=self.model.enhancer_depth, in_channels=self.dataset.channels,
                               factor=max(2, self.degradation().scale_factor))

    def recognizers(self) -> tuple[ModelConfig, ...]:
        c, ch = self.dataset.channels, self.model.recognizer_channels
        out = []
        if self.model.recognizer in ("classifier", "both"):
            out.append(classifier_config(self.model.n_classes, ch, c))
        if self.model.recognizer in ("segmenter", "both"):
            out.append(segmenter_config(self.model.seg_classes, ch, c))
        return tuple(out)

    def strategy_config(self) -> StrategyConfig:
        s = self.strategy
        return StrategyConfig(strategy=s.kind, gate_mode=s.gate_mode, supervision=s.supervision,
                              lam=s.lam, warmup_epochs=s.warmup_epochs,
                              vr_pretrain_epochs=s.vr_pretrain_epochs,
                              update_vr_params=s.update_vr_params)

    def optim_config(self) -> OptimConfig:
        o = self.optim
        return OptimConfig(lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps,
                           batch_size=o.batch_size, pretrain_lr=o.pretrain_lr)

    def validate(self) -> "ExperimentConfig":
        try:
            deg = self.degradation()
            self.scene()
            self.scene("eval")
            self.enhancer()
            self.recognizers()
            self.strategy_config()
            self.optim_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if deg.scale_factor not in (1, 2, 4):
            raise ConfigError("total downsampling must be 1, 2 or 4")
        d, r = self.dataset, self.run
        if d.height % 4 or d.width % 4:
            raise ConfigError("image height and width must be multiples of 4")
        if d.n_train < 1 or d.n_eval < 1:
            raise ConfigError("dataset sizes must be >= 1")
        if r.epochs < 0 or r.eval_interval < 1:
            raise ConfigError("run.epochs must be >= 0 and run.eval_interval >= 1")
        if not r.seeds:
            raise ConfigError("run.seeds must list at least one seed")
        for key, allowed in (("strategies", STRATEGIES), ("supervision", SUPERVISION),
                             ("gate_modes", GATE_MODES)):
            for v in getattr(self.grid, key):
                if v not in allowed:
                    raise ConfigError(f"grid.{key}: unknown value {v!r}")
        return self


def _field_key(f: dataclasses.Field) -> str:
    return f.metadata.get("key", f.name)


def _coerce(section: str, f: dataclasses.Field, raw: str) -> Any:
    name = f"{section}.{_field_key(f)}"
    text = raw.strip()
    default = (f.default_factory() if f.default is dataclasses.MISSING else f.default)
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                value = True
            elif low in ("false", "no", "off", "0"):
                value = False
            else:
                raise ValueError(f"expected a boolean, got {text!r}")
        elif isinstance(default, int):
            value = int(text)
        elif isinstance(default, float):
            value = float(text)
        elif isinstance(default, list):
            kind = f.metadata.get("kind", str)
            value = [kind(v.strip()) for v in text.split(",") if v.strip()]
        else:
            value = text
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None
    choices = f.metadata.get("choices")
    if choices is not None and value not in choices:
        raise ConfigError(f"{name}: invalid value {value!r} (expected one of {', '.join(c or '<empty>' for c in choices)})")
    return value


def parse_config_text(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if "." in key:
            sec, key = key.split(".", 1)
        elif section is None:
            raise ConfigError(f"line {lineno}: key {key!r} outside any section")
        else:
            sec = section
        if sec not in SECTIONS:
            raise ConfigError(f"line {lineno}: unknown key {sec}.{key}")
        target = getattr(cfg, sec)
        fields = {_field_key(f): f for f in dataclasses.fields(target)}
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown key {sec}.{key}")
        setattr(target, fields[key].name, _coerce(sec, fields[key], raw))
    return cfg.validate()


def parse_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text())


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg: ExperimentConfig) -> str:
    """Effective configuration in the same syntax ``parse_config`` reads."""
    out = []
    for sec in SECTIONS:
        out.append(f"[{sec}]")
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            out.append(f"{_field_key(f)} = {_format_value(getattr(obj, f.name))}")
        out.append("")
    return "\n".join(out)


def config_dict(cfg: ExperimentConfig) -> dict:
    return {sec: {_field_key(f): getattr(getattr(cfg, sec), f.name)
                  for f in dataclasses.fields(getattr(cfg, sec))} for sec in SECTIONS}


def with_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """Deep copy with dotted-key overrides given as Python values."""
    new = copy.deepcopy(cfg)
    for dotted, value in overrides.items():
        sec, key = dotted.split(".", 1)
        if sec not in SECTIONS:
            raise ConfigError(f"unknown key {dotted}")
        target = getattr(new, sec)
        fields = {_field_key(f): f for f in dataclasses.fields(target)}
        if key not in fields:
            raise ConfigError(f"unknown key {dotted}")
        setattr(target, fields[key].name, list(value) if isinstance(value, (list, tuple)) else value)
    return new.validate()
