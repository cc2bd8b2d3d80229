"""Experiment configuration: INI files with one section per stage, and presets.

Unknown sections or keys are rejected so that a misspelled ``sigma`` or
``dt`` never silently falls back to a default.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .mc import CHANNEL, LID_DRIVEN
from .solver import SCHUR_CHOICES

CHANNEL_STEPS = {0: 400, 1: 800, 2: 1600, 3: 2500}
CHANNEL_SAMPLES = {0: 60, 1: 120, 2: 240, 3: 480}
CHANNEL_L = 0.5
SCHEDULES = ("free", "cavity", "channel")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # experiment
    kind: str = LID_DRIVEN
    Re: float = 3200.0
    T: float = 1.0
    base_seed: int = 0
    workers: int = 1
    output: str = "run"
    schedule: str = "free"
    long_running: bool = False
    # mesh
    mesh_source: str = "generated"
    resolution: int = 16
    cell: str = "quad"
    mesh_file: str = ""
    level: int = 0
    h_wall: float = 0.0015
    h_core: float = 0.013
    # solver
    n_steps: int = 20
    k: int = 1
    sigma: Optional[float] = None
    tol: float = 1e-10
    restart: int = 50
    max_iter: int = 5000
    schur: str = "augmented"
    gamma: float = 10.0
    # mc
    M: int = 4
    gamma1: float = 0.025
    gamma2: float = 0.01
    K: int = 11
    # observables
    stats: bool = True
    structure: bool = True
    offsets: tuple = ()
    degrees: tuple = (1.0, 2.0, 3.0)
    wasserstein_grid: int = 16
    wasserstein_pairs: int = 256
    wasserstein_seed: int = 0

    def __post_init__(self):
        self.offsets = tuple(float(r) for r in self.offsets)
        self.degrees = tuple(float(p) for p in self.degrees)
        self.validate()

    @property
    def nu(self) -> float:
        """``L_ref / Re``: the channel half-width for the channel, 1 for the cavity."""
        return (CHANNEL_L if self.kind == CHANNEL else 1.0) / self.Re

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    def validate(self):
        if self.kind not in (LID_DRIVEN, CHANNEL):
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        for name in ("Re", "T", "tol", "gamma", "gamma1", "gamma2"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("workers", "n_steps", "M", "restart", "max_iter", "resolution", "wasserstein_grid",
                     "wasserstein_pairs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.sigma is not None and not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if self.k not in (0, 1):
            raise ConfigError("k must be 0 or 1")
        if self.level < 0 or self.base_seed < 0 or self.wasserstein_seed < 0:
            raise ConfigError("level and seeds must be nonnegative")
        if self.schur not in SCHUR_CHOICES:
            raise ConfigError(f"schur must be one of {SCHUR_CHOICES}")
        if self.mesh_source not in ("generated", "file"):
            raise ConfigError("mesh source must be 'generated' or 'file'")
        if self.mesh_source == "file" and not self.mesh_file:
            raise ConfigError("mesh source 'file' needs a mesh file")
        if self.cell not in ("quad", "tri"):
            raise ConfigError("cell must be 'quad' or 'tri'")
        if any(not r > 0 for r in self.offsets) or any(not p > 0 for p in self.degrees):
            raise ConfigError("structure offsets and degrees must be positive")
        if self.kind == LID_DRIVEN and self.K % 2 == 0 or self.kind == CHANNEL and self.K % 2 == 1:
            raise ConfigError("K must be odd for the cavity and even for the channel")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.schedule == "cavity":
            if self.kind != LID_DRIVEN or self.resolution * 100 % 32:
                raise ConfigError("cavity schedule needs the cavity and a resolution that is a multiple of 8")
            if self.n_steps != self.resolution * 100 // 32:
                raise ConfigError(f"cavity schedule: resolution {self.resolution} needs "
                                  f"{self.resolution * 100 // 32} steps, got {self.n_steps}")
        if self.schedule == "channel":
            if self.kind != CHANNEL or self.level not in CHANNEL_STEPS:
                raise ConfigError("channel schedule needs the channel and a level in 0..3")
            if self.n_steps != CHANNEL_STEPS[self.level]:
                raise ConfigError(f"channel schedule: level {self.level} needs "
                                  f"{CHANNEL_STEPS[self.level]} steps, got {self.n_steps}")


# --------------------------------------------------------------------------
# INI (de)serialization
# --------------------------------------------------------------------------
SECTIONS = {
    "experiment": ("kind", "Re", "T", "base_seed", "workers", "output", "schedule", "long_running"),
    "mesh": ("mesh_source", "resolution", "cell", "mesh_file", "level", "h_wall", "h_core"),
    "solver": ("n_steps", "k", "sigma", "tol", "restart", "max_iter", "schur", "gamma"),
    "mc": ("M", "gamma1", "gamma2", "K"),
    "observables": ("stats", "structure", "offsets", "degrees", "wasserstein_grid", "wasserstein_pairs",
                    "wasserstein_seed"),
}
_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(name: str, text: str):
    kind = _TYPES[name]
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "Optional[float]":
            return None if text.lower() in ("", "none", "default") else float(text)
        if kind == "tuple":
            return tuple(float(x) for x in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc
    return text


def _format_value(value) -> str:
    if value is None:
        return "default"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(x)) for x in value)
    return str(value)


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = _parse_value(key, raw)
    return ExperimentConfig(**values)


def serialize_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    data = asdict(cfg)
    for section, keys in SECTIONS.items():
        parser[section] = {key: _format_value(data[key]) for key in keys}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    return parse_config(text)


# --------------------------------------------------------------------------
# presets
# --------------------------------------------------------------------------
def cavity_preset(resolution: int, **kw) -> ExperimentConfig:
    """Cavity on the schedule ``N = 100 n / 32`` steps and ``M = n`` samples."""
    if resolution * 100 % 32:
        raise ConfigError(f"resolution {resolution} is not on the cavity schedule")
    base = dict(kind=LID_DRIVEN, Re=3200.0, T=1.0, resolution=resolution, n_steps=resolution * 100 // 32,
                M=resolution, schedule="cavity", long_running=resolution > 64, gamma1=0.025, gamma2=0.01,
                K=11)
    base.update(kw)
    return ExperimentConfig(**base)


def desk_preset(**kw) -> ExperimentConfig:
    """Small cavity run (16 x 16, 20 steps, 4 samples) for quick checks."""
    base = dict(kind=LID_DRIVEN, Re=3200.0, T=1.0, resolution=16, n_steps=20, M=4, schedule="free")
    base.update(kw)
    return ExperimentConfig(**base)


def channel_preset(level: int, Re: float = 1600.0, full_scale: bool = False, **kw) -> ExperimentConfig:
    """Channel with the step schedule per level; desk meshes are coarser and ``M`` is a tenth."""
    if level not in CHANNEL_STEPS:
        raise ConfigError(f"no channel row for level {level}")
    base = dict(kind=CHANNEL, Re=Re, T=0.8, level=level, n_steps=CHANNEL_STEPS[level], cell="tri",
                schedule="channel", long_running=full_scale, gamma1=0.025, gamma2=0.025, K=10)
    if full_scale:
        base.update(M=CHANNEL_SAMPLES[level], h_wall=0.0015, h_core=0.013)
    else:
        base.update(M=CHANNEL_SAMPLES[level] // 10, h_wall=0.01, h_core=0.05)
    base.update(kw)
    return ExperimentConfig(**base)


def _build_presets() -> dict:
    out = {"cavity-desk": desk_preset}
    for n in (8, 16, 32, 64, 128, 256, 512):
        out[f"cavity-{n}"] = lambda n=n: cavity_preset(n)
    for lv in (0, 1):
        out[f"channel-{lv}"] = lambda lv=lv: channel_preset(lv)
    for lv in CHANNEL_STEPS:
        for re in (1600, 3200):
            out[f"channel-full-{lv}-re{re}"] = lambda lv=lv, re=re: channel_preset(lv, Re=re, full_scale=True)
    return out


PRESETS = _build_presets()


def preset(name: str, **overrides) -> ExperimentConfig:
    try:
        cfg = PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides) if overrides else cfg
