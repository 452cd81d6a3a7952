"""Run configuration: ``key = value`` lines grouped into four sections."""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from typing import Dict


class ConfigError(ValueError):
    pass


@dataclass
class GeometryConfig:
    n: int = 64
    n_det: int = 64
    n_views: int = 30


@dataclass
class UnetSection:
    levels: int = 2
    channels: int = 8
    multiplier: int = 2
    bn_eps: float = 1e-5
    a: float = 1e-3
    p: float = 2.0
    q: float = 2.0
    init_seed: int = 0


@dataclass
class TrainingConfig:
    epochs: int = 100
    batch_size: int = 10
    lr: float = 5e-4
    lam: float = 5e-4
    seed: int = 0
    checkpoint_every: int = 0


@dataclass
class SolverConfig:
    tau: float = 1.01
    alpha1: float = 0.5
    ratio: float = 0.5
    n_max: int = 30
    inner_step: float = 1.0
    inner_max_iter: int = 200
    inner_tol: float = 1e-6
    nett_max_iter: int = 500
    art_rounds: int = 5


@dataclass
class Config:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    unet: UnetSection = field(default_factory=UnetSection)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def sections(self) -> Dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def dumps(self) -> str:
        out = io.StringIO()
        for name, section in self.sections().items():
            out.write(f"[{name}]\n")
            for f in fields(section):
                out.write(f"{f.name} = {getattr(section, f.name)!r}\n")
            out.write("\n")
        return out.getvalue()


def _coerce(section: str, key: str, kind, raw: str):
    try:
        if kind is int or kind == "int":
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None


def loads(text: str) -> Config:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = Config()
    known = cfg.sections()
    for name in parser.sections():
        if name not in known:
            raise ConfigError(f"unknown section [{name}]; expected one of {sorted(known)}")
        section = known[name]
        types = {f.name: f.type for f in fields(section)}
        for key, raw in parser.items(name):
            if key not in types:
                raise ConfigError(f"unknown key {key!r} in [{name}]; expected one of {sorted(types)}")
            setattr(section, key, _coerce(name, key, types[key], raw))
    return cfg


def load(path) -> Config:
    with open(path) as fh:
        return loads(fh.read())
