"""Simulation configuration: INI files mapped onto dataclasses.

Every section and key has a default; unknown sections or keys are errors.
Vectors are written as whitespace- or comma-separated numbers, booleans as
``yes/no/true/false``, and ``none`` clears optional values.  All quantities
are SI unless a key says otherwise.
"""
from __future__ import annotations

import configparser
import dataclasses
import logging
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class DomainConfig:
    dims: tuple = (32, 32, 32)
    dx: float = 1e-3
    # per axis: periodic | wall
    boundary: tuple = ("periodic", "periodic", "periodic")
    # 18 numbers: velocity (SI) of faces x-, x+, y-, y+, z-, z+
    face_velocity: tuple = (0.0,) * 18


@dataclass
class TimeConfig:
    dt_lbm: float = 2e-4
    steps: int = 100
    dem_substeps: int = 100
    # walker step; defaults to dt_lbm, must be an integer multiple of it
    dt_solute: typing.Optional[float] = None


@dataclass
class FluidConfig:
    enabled: bool = True
    rho: float = 1000.0
    # give either the dynamic viscosity mu or the lattice relaxation time tau
    mu: typing.Optional[float] = None
    tau: typing.Optional[float] = None
    initial_velocity: tuple = (0.0, 0.0, 0.0)
    acceleration: tuple = (0.0, 0.0, 0.0)


@dataclass
class SoluteConfig:
    enabled: bool = True
    D: float = 1e-3
    m_s: float = 1.0
    walkers: int = 1000
    # point | band | none
    source: str = "point"
    point: typing.Optional[tuple] = None
    band_lo: typing.Optional[tuple] = None
    band_hi: typing.Optional[tuple] = None
    # random | grid
    placement: str = "random"
    # lattice | uniform | none
    velocity: str = "lattice"
    uniform_velocity: tuple = (0.0, 0.0, 0.0)


@dataclass
class ParticleConfig:
    file: typing.Optional[str] = None
    # inline particle definition used when no file is given, e.g. "sphere 0.005"
    shape: typing.Optional[str] = None
    # rescale every shape to the volume of a sphere of this radius
    equivalent_radius: typing.Optional[float] = None
    count: int = 0
    density: float = 2500.0
    # random | explicit
    placement: str = "random"
    positions: tuple = ()
    random_orientation: bool = True
    initial_velocity: tuple = (0.0, 0.0, 0.0)


@dataclass
class ContactConfig:
    k_n: float = 1e3
    k_t: float = 5e2
    eta_n: float = 0.0
    eta_t: float = 0.0
    mu_s: float = 0.5
    c_tol: float = 1e-2


@dataclass
class ForcingConfig:
    gravity: tuple = (0.0, 0.0, 0.0)
    # apply gravity reduced by the displaced fluid weight
    buoyancy: bool = True
    oscillation_amplitude: float = 0.0
    oscillation_period: float = 5000.0
    # dem_steps | lbm_steps | seconds
    oscillation_time_unit: str = "dem_steps"
    oscillation_direction: tuple = (1.0, 0.0, 0.0)


@dataclass
class OutputConfig:
    directory: str = "run"
    profile_every: int = 0
    profile_axes: tuple = ("z",)
    series_every: int = 1
    vtk_every: int = 0
    checkpoint_every: int = 0
    diagnostics_every: int = 0
    audit_every: int = 100
    walker_dump_every: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    name: str = "run"


@dataclass
class SimulationConfig:
    domain: DomainConfig = field(default_factory=DomainConfig)
    time: TimeConfig = field(default_factory=TimeConfig)
    fluid: FluidConfig = field(default_factory=FluidConfig)
    solute: SoluteConfig = field(default_factory=SoluteConfig)
    particles: ParticleConfig = field(default_factory=ParticleConfig)
    contact: ContactConfig = field(default_factory=ContactConfig)
    forcing: ForcingConfig = field(default_factory=ForcingConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    run: RunConfig = field(default_factory=RunConfig)

    # derived ---------------------------------------------------------------
    @property
    def lengths(self):
        return tuple(n * self.domain.dx for n in self.domain.dims)

    @property
    def tau(self):
        f = self.fluid
        if f.tau is not None:
            return float(f.tau)
        if f.mu is not None:
            nu = f.mu / f.rho
            return 0.5 + 3.0 * nu * self.time.dt_lbm / self.domain.dx**2
        return 1.0

    @property
    def dt_dem(self):
        return self.time.dt_lbm / self.time.dem_substeps

    @property
    def dt_solute(self):
        return self.time.dt_lbm if self.time.dt_solute is None else self.time.dt_solute

    @property
    def solute_every(self):
        return int(round(self.dt_solute / self.time.dt_lbm))

    def validate(self):
        d = self.domain
        if len(d.dims) != 3 or any(int(n) < 1 for n in d.dims):
            raise ConfigError("domain.dims needs three positive integers")
        if d.dx <= 0:
            raise ConfigError("domain.dx must be positive")
        for b in d.boundary:
            if b not in ("periodic", "wall"):
                raise ConfigError(f"domain.boundary entries must be periodic or wall, got {b!r}")
        if len(d.face_velocity) != 18:
            raise ConfigError("domain.face_velocity needs 18 numbers")
        if self.time.dt_lbm <= 0 or self.time.steps < 0:
            raise ConfigError("time.dt_lbm must be positive and time.steps non-negative")
        if self.time.dem_substeps < 1:
            raise ConfigError("time.dem_substeps must be at least 1")
        k = self.dt_solute / self.time.dt_lbm
        if k < 1 - 1e-9 or abs(k - round(k)) > 1e-9:
            raise ConfigError("time.dt_solute must be an integer multiple of time.dt_lbm")
        if self.fluid.enabled and self.tau <= 0.5:
            raise ConfigError(f"relaxation time {self.tau:.6g} does not exceed 0.5; lower dt_lbm or raise viscosity")
        s = self.solute
        if s.source not in ("point", "band", "none"):
            raise ConfigError(f"unknown solute.source {s.source!r}")
        if s.velocity not in ("lattice", "uniform", "none"):
            raise ConfigError(f"unknown solute.velocity {s.velocity!r}")
        if s.velocity == "lattice" and not self.fluid.enabled:
            raise ConfigError("solute.velocity = lattice requires fluid.enabled")
        p = self.particles
        if p.count > 0 and not (p.file or p.shape):
            raise ConfigError("particles.count > 0 needs particles.file or particles.shape")
        if p.placement not in ("random", "explicit"):
            raise ConfigError(f"unknown particles.placement {p.placement!r}")
        if p.placement == "explicit" and len(p.positions) != 3 * p.count:
            raise ConfigError("particles.positions needs 3 numbers per particle")
        if self.forcing.oscillation_time_unit not in ("dem_steps", "lbm_steps", "seconds"):
            raise ConfigError("forcing.oscillation_time_unit must be dem_steps, lbm_steps or seconds")
        if self.fluid.enabled:
            u = max(abs(v) for v in self.fluid.initial_velocity + self.solute.uniform_velocity + d.face_velocity)
            cfl = u * self.time.dt_lbm / d.dx
            if cfl > 0.1:
                log.warning("expected |u| dt/dx = %.3g exceeds 0.1", cfl)
        return self


def _section_types():
    return {
        "domain": DomainConfig, "time": TimeConfig, "fluid": FluidConfig, "solute": SoluteConfig,
        "particles": ParticleConfig, "contact": ContactConfig, "forcing": ForcingConfig,
        "output": OutputConfig, "run": RunConfig,
    }


def _coerce(text, default, annotation):
    s = text.strip()
    optional = "Optional" in str(annotation)
    if optional and s.lower() in ("none", ""):
        return None
    if isinstance(default, bool) or annotation in (bool, "bool"):
        v = s.lower()
        if v in ("yes", "true", "on", "1"):
            return True
        if v in ("no", "false", "off", "0"):
            return False
        raise ConfigError(f"cannot read {s!r} as a boolean")
    if isinstance(default, int) or annotation in (int, "int"):
        return int(float(s))
    if isinstance(default, float) or annotation in (float, "float") or "float" in str(annotation):
        return float(s)
    if isinstance(default, tuple) or "tuple" in str(annotation):
        parts = s.replace(",", " ").split()
        out = []
        for p in parts:
            try:
                out.append(int(p) if p.lstrip("+-").isdigit() else float(p))
            except ValueError:
                out.append(p)
        return tuple(out)
    return s


def from_mapping(data):
    """Build a config from ``{section: {key: text}}``."""
    types = _section_types()
    cfg = SimulationConfig()
    for sec, items in data.items():
        if sec not in types:
            raise ConfigError(f"unknown section [{sec}]")
        obj = getattr(cfg, sec)
        fields = {f.name: f for f in dataclasses.fields(obj)}
        for key, text in items.items():
            if key not in fields:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            f = fields[key]
            default = getattr(obj, key)
            try:
                val = _coerce(str(text), default, f.type)
            except ValueError as e:
                raise ConfigError(f"[{sec}] {key}: {e}") from None
            setattr(obj, key, val)
    cfg.domain.dims = tuple(int(n) for n in cfg.domain.dims)
    return cfg.validate()


def load_config(path):
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = str
    text = Path(path).read_text()
    cp.read_string(text, source=str(path))
    data = {sec: dict(cp[sec]) for sec in cp.sections()}
    cfg = from_mapping(data)
    # relative particle files are resolved against the config location
    if cfg.particles.file and not Path(cfg.particles.file).is_absolute():
        cfg.particles.file = str((Path(path).parent / cfg.particles.file).resolve())
    return cfg


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, tuple):
        return " ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg):
    """INI text that :func:`load_config` reads back to an equal config."""
    out = []
    for sec in _section_types():
        out.append(f"[{sec}]")
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            out.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
        out.append("")
    return "\n".join(out)


def replace(cfg, **sections):
    """Copy of ``cfg`` with ``section={key: value}`` overrides applied."""
    new = SimulationConfig(**{s: dataclasses.replace(getattr(cfg, s)) for s in _section_types()})
    for sec, vals in sections.items():
        obj = getattr(new, sec)
        for k, v in vals.items():
            if not hasattr(obj, k):
                raise ConfigError(f"unknown key {k!r} in [{sec}]")
            setattr(obj, k, v)
    return new.validate()


def period_in_seconds(cfg):
    f = cfg.forcing
    if f.oscillation_time_unit == "dem_steps":
        return f.oscillation_period * cfg.dt_dem
    if f.oscillation_time_unit == "lbm_steps":
        return f.oscillation_period * cfg.time.dt_lbm
    return f.oscillation_period


def oscillation(cfg, t_seconds):
    """Acceleration vector ``A cos(2 pi t / period) d`` at time ``t``."""
    f = cfg.forcing
    d = f.oscillation_direction
    n = math.sqrt(sum(x * x for x in d))
    a = f.oscillation_amplitude * math.cos(2 * math.pi * t_seconds / period_in_seconds(cfg))
    return tuple(a * x / n for x in d)
