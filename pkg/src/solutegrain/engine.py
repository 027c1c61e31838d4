"""Coupled time loop: fluid, particles and solute advanced in a fixed order.

Per lattice step::

    classify -> collide_stream -> ibb -> mem -> dem -> refill -> walkers -> deposit -> output

Classification is carried over from the previous step's refill stage, so it
only runs as its own stage on the first step or after a restart.  Hydrodynamic
forces from the momentum exchange are held fixed over the DEM sub-steps.
"""
from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np

from . import fsi
from .config import dump_config, oscillation
from .dem import ContactManager, ContactMaterial, ParticleSystem, Wall, integrate, make_particle, mass_properties
from .io import CsvLog, PROFILE_HEADER, array_digest, load_checkpoint, profile_rows, save_checkpoint, write_vtk
from .lbm import SOLID, LatticeField
from .metaball import load_particle_file, parse_particle_file
from .solute import (
    Domain,
    LatticeVelocity,
    UniformVelocity,
    StepEvents,
    axis_counts,
    classify_and_resolve,
    deposit,
    initialize_band,
    initialize_point_source,
    interior_walkers,
    max_exterior_violation,
    step_walkers,
)

log = logging.getLogger(__name__)

AXES = {"x": 0, "y": 1, "z": 2}
# exact walker moments, written next to the binned profiles
MOMENT_HEADER = ["time", "axis", "mean", "variance"]


class SimulationError(RuntimeError):
    """Hard failure of the coupled loop; ``bundle`` holds diagnostic context."""

    def __init__(self, msg, bundle=None):
        super().__init__(msg)
        self.bundle = bundle or {}


def random_quaternion(rng):
    q = rng.standard_normal(4)
    return q / np.linalg.norm(q)


def particle_shapes(cfg):
    p = cfg.particles
    if p.file:
        shapes = load_particle_file(p.file)
    elif p.shape:
        shapes = parse_particle_file(p.shape.replace(";", "\n"))
    else:
        return []
    if p.equivalent_radius:
        shapes = [scale_to_radius(s, p.equivalent_radius) for s in shapes]
    return shapes


def scale_to_radius(shape, radius):
    """Copy of ``shape`` scaled to the volume of a sphere of ``radius``."""
    V, _, _ = mass_properties(shape, 1.0)
    r = (3 * V / (4 * math.pi)) ** (1 / 3)
    return shape.scaled(radius / r)


def place_particles(cfg, shapes, rng, max_tries=100000):
    """Particles at explicit or random non-overlapping positions."""
    p = cfg.particles
    if p.count == 0:
        return []
    L = np.array(cfg.lengths)
    periodic = np.array([b == "periodic" for b in cfg.domain.boundary])
    out = []
    centres = []
    radii = []
    for k in range(p.count):
        shape = shapes[k % len(shapes)]
        q = random_quaternion(rng) if p.random_orientation else np.array([1.0, 0, 0, 0])
        if p.placement == "explicit":
            x = np.array(p.positions[3 * k : 3 * k + 3], float)
        else:
            r = shape.bounding_radius()
            for _ in range(max_tries):
                lo = np.where(periodic, 0.0, r + cfg.domain.dx)
                hi = np.where(periodic, L, L - r - cfg.domain.dx)
                x = lo + (hi - lo) * rng.random(3)
                ok = True
                for c, rc in zip(centres, radii):
                    d = x - c
                    d -= np.where(periodic, L * np.round(d / L), 0.0)
                    if np.linalg.norm(d) < r + rc + cfg.domain.dx:
                        ok = False
                        break
                if ok:
                    break
            else:
                raise SimulationError(f"could not place particle {k} without overlap after {max_tries} tries")
        part = make_particle(shape, p.density, x, q, p.initial_velocity, pid=k)
        out.append(part)
        centres.append(x)
        radii.append(part.shape.bounding_radius())
    return out


class Simulation:
    """One coupled run built from a :class:`SimulationConfig`."""

    def __init__(self, cfg, out_dir=None, write_outputs=True, observers=()):
        self.cfg = cfg
        # callables ``f(sim)`` run after every step
        self.observers = list(observers)
        self.out_dir = Path(out_dir if out_dir is not None else cfg.output.directory)
        self.write_outputs = write_outputs
        self.rng = np.random.default_rng(cfg.run.seed)
        self.step_index = 0
        self.trace = []
        self.events = StepEvents()
        self.history = {"time": [], "u_fluid": [], "u_particle": [], "alive": []}
        d = cfg.domain
        self.lengths = np.array(cfg.lengths)
        self.domain = Domain(self.lengths, tuple("periodic" if b == "periodic" else "reflect" for b in d.boundary))
        # fluid
        self.lattice = None
        if cfg.fluid.enabled:
            self.lattice = LatticeField(
                d.dims, d.dx, cfg.time.dt_lbm, cfg.tau, cfg.fluid.rho, tuple(d.boundary),
                np.array(d.face_velocity, float).reshape(6, 3), np.array(cfg.fluid.acceleration, float),
            )
            self.lattice.set_equilibrium(1.0, np.array(cfg.fluid.initial_velocity, float))
        # particles
        self.shapes = particle_shapes(cfg)
        parts = place_particles(cfg, self.shapes, self.rng) if self.shapes else []
        self.system = ParticleSystem(parts)
        self.particle_volume = np.array([p.mass / cfg.particles.density for p in parts]) if parts else np.zeros(0)
        walls = []
        for a, b in enumerate(d.boundary):
            if b == "wall":
                n = np.zeros(3)
                n[a] = 1.0
                walls.append(Wall(np.zeros(3), n))
                pt = np.zeros(3)
                pt[a] = self.lengths[a]
                walls.append(Wall(pt, -n))
        c = cfg.contact
        box = (self.lengths, np.array([b == "periodic" for b in d.boundary]))
        self.contacts = ContactManager(ContactMaterial(c.k_n, c.k_t, c.eta_n, c.eta_t, c.mu_s), walls, box, c.c_tol)
        self.periodic_box = box
        self.cls = None
        self.hydro_force = np.zeros((len(self.system), 3))
        self.hydro_torque = np.zeros((len(self.system), 3))
        self.last_refilled = 0
        # solute
        self.swarm = None
        if cfg.solute.enabled and cfg.solute.source != "none":
            self.swarm = self._init_swarm()
        self._logs = {}
        self._record()

    # ------------------------------------------------------------------
    def _init_swarm(self):
        s = self.cfg.solute
        if s.source == "point":
            x0 = np.array(s.point if s.point is not None else 0.5 * self.lengths, float)
            sw = initialize_point_source(x0, s.walkers, s.m_s, s.D, self.rng)
            bad = interior_walkers(self.system, sw.positions, self.domain)
            if len(bad):
                from .solute import SoluteError

                raise SoluteError("point source lies inside a particle")
            return sw
        lo = np.array(s.band_lo if s.band_lo is not None else np.zeros(3), float)
        hi = np.array(s.band_hi if s.band_hi is not None else self.lengths, float)
        return initialize_band((lo, hi), s.walkers, self.system, self.domain, s.m_s, s.D, self.rng, s.placement)

    @property
    def time(self):
        return self.step_index * self.cfg.time.dt_lbm

    def _gravity(self):
        g = np.array(self.cfg.forcing.gravity, float)
        if len(self.system) == 0:
            return np.zeros((0, 3))
        if self.cfg.forcing.buoyancy and self.lattice is not None:
            density = self.system.mass / np.maximum(self.particle_volume, 1e-300)
            return g[None, :] * (1.0 - self.cfg.fluid.rho / density)[:, None]
        return np.repeat(g[None, :], len(self.system), 0)

    # ------------------------------------------------------------------
    def step(self):
        cfg = self.cfg
        trace = []
        lat = self.lattice
        n = len(self.system)
        if lat is not None:
            if self.cls is None:
                self.cls = fsi.classify_nodes(lat, self.system)
                fsi.apply_classification(lat, self.cls)
                trace.append("classify")
            exch = {}

            def hook(field):
                trace.append("ibb")
                exch["x"] = fsi.ibb_apply(field, self.cls.links)

            trace.append("collide_stream")
            lat.collide_stream(hook)
            trace.append("mem")
            self.hydro_force, self.hydro_torque = fsi.momentum_exchange(lat, self.cls.links, exch["x"], n)
        if n:
            trace.append("dem")
            self._dem_substeps()
        if lat is not None and n:
            trace.append("refill")
            old_kind = self.cls.kind
            old_owner = self.cls.owner
            new = fsi.classify_nodes(lat, self.system)
            fsi.apply_classification(lat, new)
            fresh = fsi.refill(lat, old_kind, old_owner, new, self.system)
            self.last_refilled = len(fresh)
            self.cls = new
        self.step_index += 1
        if self.swarm is not None and self.step_index % cfg.solute_every == 0:
            trace.append("walkers")
            self._walker_step()
            trace.append("deposit")
            self.concentration = deposit(self.swarm, cfg.domain.dims, cfg.domain.dx)
        self.trace.append(trace)
        self._record()
        for obs in self.observers:
            obs(self)
        return trace

    def _dem_substeps(self):
        cfg = self.cfg
        dt = cfg.dt_dem
        g = self._gravity()
        sys = self.system
        for k in range(cfg.time.dem_substeps):
            t = (self.step_index * cfg.time.dem_substeps + k) * dt
            sys.force[...] = self.hydro_force
            sys.torque[...] = self.hydro_torque
            self.contacts.accumulate(sys, dt)
            extra = g
            if cfg.forcing.oscillation_amplitude:
                extra = g + np.array(oscillation(cfg, t))[None, :]
            try:
                integrate(sys, (0.0, 0.0, 0.0), dt, extra_acceleration=extra, periodic_box=self.periodic_box)
            except FloatingPointError as e:
                raise SimulationError(str(e), {"step": self.step_index, "substep": k}) from e

    def _walker_step(self):
        cfg = self.cfg
        dt = cfg.dt_solute
        s = cfg.solute
        if s.velocity == "lattice":
            sampler = LatticeVelocity(self.lattice)
        elif s.velocity == "uniform":
            sampler = UniformVelocity(s.uniform_velocity)
        else:
            sampler = None
        prop = step_walkers(self.swarm, sampler, dt)
        new, ev = classify_and_resolve(self.swarm, prop, self.system, self.domain, dt, cfg.domain.dx)
        if len(new) != self.swarm.initial_count:
            raise SimulationError("walker count changed", {"step": self.step_index})
        self.swarm.positions = new
        self.events.add(ev)

    def _record(self):
        h = self.history
        h["time"].append(self.time)
        if self.lattice is not None:
            fluid = self.lattice.kind != SOLID
            h["u_fluid"].append(float(self.lattice.u[0][fluid].mean() * self.lattice.velocity_scale))
        else:
            h["u_fluid"].append(0.0)
        if len(self.system):
            vol = self.particle_volume
            h["u_particle"].append(float(np.sum(self.system.v[:, 0] * vol) / vol.sum()))
        else:
            h["u_particle"].append(0.0)
        h["alive"].append(self.swarm.alive if self.swarm is not None else 0)

    # ------------------------------------------------------------------
    def audit(self):
        """Walker count, exterior invariant, fluid mass; raises on violated conservation."""
        out = {"step": self.step_index}
        if self.swarm is not None:
            out["alive"] = self.swarm.alive
            out["exterior_violation"] = max_exterior_violation(self.system, self.swarm.positions, self.domain)
            if self.swarm.alive != self.swarm.initial_count:
                raise SimulationError("walker count changed", out)
        if self.lattice is not None:
            out["fluid_mass"] = self.lattice.total_mass()
        if len(self.system):
            out["particle_momentum"] = self.system.momentum().tolist()
        return out

    def solid_fraction(self):
        return float(self.particle_volume.sum() / np.prod(self.lengths))

    # ------------------------------------------------------------------
    def _open_logs(self, append):
        o = self.cfg.output
        self.out_dir.mkdir(parents=True, exist_ok=True)
        logs = {}
        if o.profile_every and self.swarm is not None:
            logs["profiles"] = CsvLog(self.out_dir / "profiles.csv", PROFILE_HEADER, append)
            logs["moments"] = CsvLog(self.out_dir / "moments.csv", MOMENT_HEADER, append)
        if o.series_every:
            logs["series"] = CsvLog(self.out_dir / "series.csv",
                                    ["step", "time", "u_fluid_x", "u_particle_x", "alive", "fluid_mass", "kinetic_energy", "max_speed"], append)
        if o.diagnostics_every and self.lattice is not None:
            logs["coupling"] = CsvLog(self.out_dir / "coupling.csv", fsi.DIAGNOSTIC_HEADER, append)
        if o.audit_every:
            logs["audit"] = CsvLog(self.out_dir / "audit.csv", ["step", "alive", "exterior_violation", "fluid_mass"], append)
        if o.diagnostics_every and len(self.system):
            logs["particles"] = CsvLog(self.out_dir / "particles.csv",
                                       ["step", "particle", "x", "y", "z", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz"], append)
        self._logs = logs

    def _write_outputs(self):
        o = self.cfg.output
        k = self.step_index
        logs = self._logs
        dx = self.cfg.domain.dx
        if "profiles" in logs and k % o.profile_every == 0:
            for ax in o.profile_axes:
                a = AXES[ax]
                counts = axis_counts(self.swarm.positions, a, self.cfg.domain.dims[a], dx)
                logs["profiles"].write_many(profile_rows(self.time, ax, counts, dx, self.swarm.m_s))
                z = self.swarm.positions[:, a]
                logs["moments"].write([f"{self.time:.10g}", ax, f"{z.mean():.12g}", f"{z.var():.12g}"])
        if "series" in logs and k % o.series_every == 0:
            lat = self.lattice
            h = self.history
            logs["series"].write([
                k, f"{self.time:.10g}", f"{h['u_fluid'][-1]:.10g}", f"{h['u_particle'][-1]:.10g}", h["alive"][-1],
                f"{lat.total_mass():.12g}" if lat is not None else "", f"{lat.kinetic_energy():.10g}" if lat is not None else "",
                f"{lat.max_speed():.10g}" if lat is not None else "",
            ])
        if "coupling" in logs and k % o.diagnostics_every == 0:
            logs["coupling"].write_many(fsi.diagnostics_rows(
                k, self.hydro_force, self.hydro_torque, len(self.cls.links) if self.cls else 0, self.last_refilled,
                self.system.pid))
        if "particles" in logs and k % o.diagnostics_every == 0:
            w = self.system.omega()
            for i in range(len(self.system)):
                logs["particles"].write([k, int(self.system.pid[i]), *self.system.x[i], *self.system.q[i], *self.system.v[i], *w[i]])
        if "audit" in logs and k % o.audit_every == 0:
            a = self.audit()
            logs["audit"].write([k, a.get("alive", ""), a.get("exterior_violation", ""), a.get("fluid_mass", "")])
        if o.vtk_every and k % o.vtk_every == 0 and self.lattice is not None:
            conc = self.concentration.concentration if self.swarm is not None and hasattr(self, "concentration") else None
            write_vtk(self.out_dir / f"field_{k:07d}.vtk", self.lattice, conc)
        if o.walker_dump_every and k % o.walker_dump_every == 0 and self.swarm is not None:
            np.savetxt(self.out_dir / f"walkers_{k:07d}.csv", self.swarm.positions, delimiter=",", header="x,y,z", comments="")
        if o.checkpoint_every and k % o.checkpoint_every == 0:
            self.save_checkpoint(self.out_dir / "checkpoint.npz")

    def run(self, steps=None, resume=False):
        """Advance ``steps`` lattice steps (default: the configured count) and write outputs."""
        steps = self.cfg.time.steps if steps is None else steps
        if self.write_outputs:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "config.ini").write_text(dump_config(self.cfg))
            self._open_logs(append=resume)
            if not resume:
                self._write_outputs()
        try:
            for _ in range(steps):
                self.step()
                if self.write_outputs:
                    self._write_outputs()
        finally:
            for lg in self._logs.values():
                lg.close()
            self._logs = {}
        if self.write_outputs:
            self.write_meta()
        return self

    def write_meta(self):
        meta = {
            "steps": self.step_index,
            "time": self.time,
            "dx": self.cfg.domain.dx,
            "dt_lbm": self.cfg.time.dt_lbm,
            "tau": self.lattice.tau if self.lattice is not None else None,
            "viscosity": self.lattice.viscosity if self.lattice is not None else None,
            "phi_solid": self.solid_fraction(),
            "n_particles": len(self.system),
            "alive": self.swarm.alive if self.swarm is not None else 0,
            "initial_walkers": self.swarm.initial_count if self.swarm is not None else 0,
            "removed_at_init": self.swarm.removed_at_init if self.swarm is not None else 0,
            "particle_radius": float(np.mean([(3 * v / (4 * math.pi)) ** (1 / 3) for v in self.particle_volume])) if len(self.system) else 0.0,
            "events": self.events.__dict__,
        }
        (self.out_dir / "meta.json").write_text(json.dumps(meta, indent=1))
        return meta

    # ------------------------------------------------------------------
    def state_arrays(self):
        arrs = {"step_index": np.array(self.step_index)}
        if self.lattice is not None:
            arrs.update(G=self.lattice.G, rho=self.lattice.rho, u=self.lattice.u, kind=self.lattice.kind)
            if self.cls is not None:
                arrs["owner"] = self.cls.owner
        if len(self.system):
            for k, v in self.system.state().items():
                arrs["p_" + k] = v
            arrs["hydro_force"] = self.hydro_force
            arrs["hydro_torque"] = self.hydro_torque
        if self.swarm is not None:
            arrs["walkers"] = self.swarm.positions
        return arrs

    def save_checkpoint(self, path):
        meta = {
            "rng": self.rng.bit_generator.state,
            "springs": [[list(k), v.tolist()] for k, v in self.contacts.springs.items()],
            "config": dump_config(self.cfg),
            "events": self.events.__dict__,
        }
        save_checkpoint(path, self.state_arrays(), meta)

    def load_checkpoint(self, path):
        arrs, meta = load_checkpoint(path)
        self.step_index = int(arrs["step_index"])
        self.rng.bit_generator.state = meta["rng"]
        if self.swarm is not None:
            self.swarm.rng = self.rng
            self.swarm.positions = arrs["walkers"].copy()
        if self.lattice is not None:
            lat = self.lattice
            lat.G = arrs["G"].copy()
            lat.rho = arrs["rho"].copy()
            lat.u = arrs["u"].copy()
            lat.kind = arrs["kind"].copy()
            lat.time_step = self.step_index
        if len(self.system):
            self.system.load_state({k[2:]: v for k, v in arrs.items() if k.startswith("p_")})
            self.hydro_force = arrs["hydro_force"].copy()
            self.hydro_torque = arrs["hydro_torque"].copy()
        self.contacts.springs = {tuple(k): np.array(v) for k, v in meta["springs"]}
        self.events = StepEvents(**meta["events"])
        if self.lattice is not None and len(self.system):
            # the link set is a pure function of poses and lattice shape
            self.cls = fsi.classify_nodes(self.lattice, self.system, velocities=False)
            self.cls.owner = arrs["owner"].copy() if "owner" in arrs else self.cls.owner
        elif self.lattice is not None:
            self.cls = fsi.classify_nodes(self.lattice, self.system, velocities=False)
        return self

    def digest(self):
        return array_digest(*[v for _, v in sorted(self.state_arrays().items())])
