"""Experiment configuration documents (YAML or JSON) with strict key checking."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError, PotAlignError
from .ot_solvers import SolverConfig
from .psat import ModelConfig
from .synth import WorldConfig
from .train_eval import TrainConfig

OUTPUT_ROOT_ENV = "POTALIGN_OUTPUT_ROOT"


@dataclass
class OutputConfig:
    directory: str = ""       # empty: $POTALIGN_OUTPUT_ROOT or ./runs, plus a run name
    run_name: str = "run"
    save_checkpoint: bool = True

    def resolved_dir(self) -> Path:
        if self.directory:
            return Path(self.directory)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / self.run_name


# section name -> dataclass; "train" holds the TrainConfig scalars only
SECTIONS = {"world": WorldConfig, "solver": SolverConfig, "model": ModelConfig,
            "train": TrainConfig, "output": OutputConfig}
_NESTED = ("solver", "model")


def _scalar_fields(cls):
    return {f.name: f for f in fields(cls) if not (cls is TrainConfig and f.name in _NESTED)}


def _build(cls, section: str, values) -> object:
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = _scalar_fields(cls)
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    kw = {}
    for name, value in values.items():
        default = known[name].default
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{section}.{name} must be a boolean")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                if not (value is None and name == "mass"):
                    raise ConfigError(f"{section}.{name} must be a number, got {value!r}")
            if isinstance(default, int) and isinstance(value, float):
                if not value.is_integer():
                    raise ConfigError(f"{section}.{name} must be an integer")
                value = int(value)
        kw[name] = value
    try:
        return cls(**kw)
    except PotAlignError as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @classmethod
    def from_dict(cls, doc: dict | None) -> "ExperimentConfig":
        doc = doc or {}
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a mapping")
        unknown = sorted(set(doc) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
        world = _build(WorldConfig, "world", doc.get("world"))
        solver = _build(SolverConfig, "solver", doc.get("solver"))
        model = _build(ModelConfig, "model", doc.get("model"))
        tdoc = dict(doc.get("train") or {})
        if not isinstance(doc.get("train") or {}, dict):
            raise ConfigError("section 'train' must be a mapping")
        base = _build(TrainConfig, "train", tdoc)
        kw = {f: getattr(base, f) for f in _scalar_fields(TrainConfig)}
        try:
            train = TrainConfig(solver=solver, model=model, **kw)
        except PotAlignError as exc:
            raise ConfigError(f"invalid 'train' section: {exc}") from exc
        cfg = cls(world, solver, model, train, _build(OutputConfig, "output", doc.get("output")))
        cfg.check()
        return cfg

    def check(self) -> None:
        if self.world.side != self.model.side:
            raise ConfigError(f"world.side={self.world.side} but model.side={self.model.side}")
        if self.world.embed_dim != self.model.out_dim:
            raise ConfigError(f"world.embed_dim={self.world.embed_dim} but model.out_dim={self.model.out_dim}")
        if self.train.batch_size > self.world.n_subjects:
            raise ConfigError("train.batch_size exceeds world.n_subjects")

    def to_dict(self) -> dict:
        train = {k: getattr(self.train, k) for k in _scalar_fields(TrainConfig)}
        return {"world": asdict(self.world), "solver": asdict(self.solver),
                "model": asdict(self.model), "train": train, "output": asdict(self.output)}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        doc = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{p}: not valid {'JSON' if p.suffix == '.json' else 'YAML'}: {exc}") from exc
    return ExperimentConfig.from_dict(doc)
