"""Experiment configuration: an INI-style key/value file with one section
per stage. Unknown keys are errors; missing keys take their defaults.

    [population]
    n_normal = 25
    dims = (48, 48, 48)

    [train]
    epochs = 2500
    hidden = 512

    [infer]
    epochs = 1500

    [eval]
    k = 5
    quantile = 5.0
"""
from __future__ import annotations

import ast
import configparser
import dataclasses
from dataclasses import dataclass, field

from .infer import InferConfig
from .synth import PopulationSpec
from .tensor import ContractError
from .train import TrainConfig


@dataclass
class EvalConfig:
    k: int = 5
    quantile: float = 5.0
    fold_seed: int = 0
    test_scans: int | None = None  # scans per test subject to score; None = all

    def __post_init__(self):
        if self.k < 2:
            raise ContractError("k must be >= 2")
        if not 0 < self.quantile < 100:
            raise ContractError("quantile must lie in (0, 100)")
        if self.test_scans is not None and self.test_scans < 1:
            raise ContractError("test_scans must be >= 1")


@dataclass
class ExperimentConfig:
    population: PopulationSpec = field(default_factory=PopulationSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, population={"seed": seed}, train={"seed": seed}, infer={"seed": seed},
                       eval={"fold_seed": seed})

    def dumps(self) -> str:
        lines = []
        for name, values in self.to_dict().items():
            lines.append(f"[{name}]")
            lines += [f"{k} = {v!r}" for k, v in values.items()]
            lines.append("")
        return "\n".join(lines)


_SECTIONS = {"population": PopulationSpec, "train": TrainConfig, "infer": InferConfig, "eval": EvalConfig}


def replace(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    """New config with per-section field overrides, re-validated."""
    parts = {}
    for name, cls in _SECTIONS.items():
        values = dataclasses.asdict(getattr(cfg, name))
        for key, val in (sections.get(name) or {}).items():
            if key not in values:
                raise ContractError(f"unknown key {name}.{key}")
            values[key] = val
        try:
            parts[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ContractError(f"invalid [{name}] settings: {exc}") from exc
    return ExperimentConfig(**parts)


def _parse_value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        if text.lower() in ("true", "false"):
            return text.lower() == "true"
        if text.lower() in ("none", "null"):
            return None
        return text


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ContractError(f"malformed config: {exc}") from exc
    unknown = set(parser.sections()) - set(_SECTIONS)
    if unknown:
        raise ContractError(f"unknown config sections: {sorted(unknown)}")
    overrides = {s: {k: _parse_value(v) for k, v in parser[s].items()} for s in parser.sections()}
    return replace(ExperimentConfig(), **overrides)


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
