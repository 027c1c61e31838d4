"""Canonical scenarios: configuration builders plus scenario-specific observables."""
from __future__ import annotations

import numpy as np

from .config import SimulationConfig, replace
from .engine import Simulation

# fluid and solute constants used by the bench cases
WATER_MU = 1e-3
WATER_RHO = 1000.0


def diffusion_config(walkers=1_000_000, steps=500, seed=0, directory="runs/diffusion", D=1e-3, n=100):
    """Point release at the centre of a periodic box with no flow."""
    dx = 1e-3
    return replace(
        SimulationConfig(),
        domain=dict(dims=(n, n, n), dx=dx, boundary=("periodic",) * 3),
        time=dict(dt_lbm=2e-4, steps=steps, dem_substeps=1),
        fluid=dict(enabled=False),
        solute=dict(D=D, m_s=1.0 / walkers, walkers=walkers, source="point", point=(0.5 * n * dx,) * 3, velocity="none"),
        output=dict(directory=directory, profile_every=50, profile_axes=("x", "y", "z"), series_every=0, audit_every=0),
        run=dict(seed=seed, name="diffusion"),
    )


def advection_config(u=(1.0, 0.0, 0.0), **kw):
    """As :func:`diffusion_config` with an imposed uniform velocity field."""
    cfg = diffusion_config(**kw)
    return replace(cfg, solute=dict(velocity="uniform", uniform_velocity=tuple(float(v) for v in u)),
                   run=dict(seed=cfg.run.seed, name="advection"))


def settling_config(scale="paper", seed=0, directory="runs/settling", shape="sphere 0.01", density=1100.0,
                    tau=None, walkers=None, steps=None):
    """Closed box with a dense solute layer at the bottom and one particle released above it.

    ``scale='paper'`` is the 0.04 x 0.04 x 0.15 m bench; ``scale='desk'`` a
    reduced box with a smaller, heavier particle and a larger viscosity so
    the particle crosses the interface within a few thousand steps.
    """
    dx = 1e-3
    if scale == "paper":
        dims = (40, 40, 150)
        band_top = 0.03
        start = (0.02, 0.02, 0.10)
        walkers = walkers or 4_000_000
        steps = steps or 30000
        tau = tau or 0.55
        substeps = 100
    elif scale == "desk":
        dims = (16, 16, 40)
        band_top = 0.012
        # small enough that its return flow barely lifts the layer before contact
        start = (0.008, 0.008, 0.018)
        shape = shape if shape != "sphere 0.01" else "sphere 0.002"
        density = density if density != 1100.0 else 2500.0
        walkers = walkers or 300_000
        steps = steps or 2500
        tau = tau or 0.8
        substeps = 20
    else:
        raise ValueError(f"unknown scale {scale!r}")
    Lx, Ly = dims[0] * dx, dims[1] * dx
    return replace(
        SimulationConfig(),
        domain=dict(dims=dims, dx=dx, boundary=("wall", "wall", "wall")),
        time=dict(dt_lbm=2e-4, steps=steps, dem_substeps=substeps),
        fluid=dict(rho=WATER_RHO, tau=tau),
        solute=dict(D=2e-9, m_s=1.0 / walkers, walkers=walkers, source="band", band_lo=(0.0, 0.0, 0.0),
                    band_hi=(Lx, Ly, band_top), placement="random", velocity="lattice"),
        particles=dict(shape=shape, count=1, density=density, placement="explicit", positions=start,
                       random_orientation=False),
        contact=dict(k_n=1e2, k_t=5e1, eta_n=0.05, eta_t=0.0, mu_s=0.3),
        forcing=dict(gravity=(0.0, 0.0, -9.81), buoyancy=True),
        output=dict(directory=directory, profile_every=0, series_every=10, audit_every=100),
        run=dict(seed=seed, name="settling"),
    )


def interface_height(positions, dims, dx, reference, exclude=None):
    """Mean over (x, y) columns of the height where the walker count drops below half ``reference``.

    ``reference`` is the per-cell walker count of the undisturbed layer.
    Within each column the crossing is located from the top down and
    interpolated linearly between cell centres.  Columns flagged in the
    boolean ``(nx, ny)`` array ``exclude`` are left out of the mean.
    """
    nx, ny, nz = dims
    idx = np.floor(positions / dx).astype(np.int64)
    for a in range(3):
        np.clip(idx[:, a], 0, dims[a] - 1, out=idx[:, a])
    counts = np.bincount(np.ravel_multi_index(idx.T, dims), minlength=nx * ny * nz).reshape(dims).astype(float)
    thr = 0.5 * reference
    above = counts >= thr
    # highest cell per column at or above threshold
    any_ = above.any(axis=2)
    top = nz - 1 - np.argmax(above[:, :, ::-1], axis=2)
    c_k = np.take_along_axis(counts, top[..., None], 2)[..., 0]
    nxt = np.minimum(top + 1, nz - 1)
    c_n = np.take_along_axis(counts, nxt[..., None], 2)[..., 0]
    c_n = np.where(top == nz - 1, 0.0, c_n)
    frac = np.where(c_k > c_n, (c_k - thr) / np.maximum(c_k - c_n, 1e-300), 0.5)
    h = (top + 0.5 + frac) * dx
    h = np.where(any_, h, 0.0)
    if exclude is not None and not exclude.all():
        h = h[~exclude]
    return float(h.mean())


def footprint_columns(system, dims, dx, margin=1.0):
    """Columns whose centre lies within ``radius + margin*dx`` of a particle axis in (x, y)."""
    nx, ny = dims[0], dims[1]
    X, Y = np.meshgrid((np.arange(nx) + 0.5) * dx, (np.arange(ny) + 0.5) * dx, indexing="ij")
    mask = np.zeros((nx, ny), dtype=bool)
    for p in range(len(system)):
        r = system.radius[p] + margin * dx
        mask |= (X - system.x[p, 0]) ** 2 + (Y - system.x[p, 1]) ** 2 < r * r
    return mask


class InterfaceTracker:
    """Observer recording the interface height and the particle's lowest point each step.

    Like a side view through the box wall, the height is averaged over the
    columns outside the particles' horizontal footprint: inside it the
    topmost solute sits under the particle and says nothing about the
    interface.
    """

    def __init__(self, sim, every=1):
        s = sim.cfg.solute
        self.every = every
        self.dims = sim.cfg.domain.dims
        self.dx = sim.cfg.domain.dx
        lo, hi = np.asarray(s.band_lo, float), np.asarray(s.band_hi, float)
        band_cells = np.prod((hi - lo) / self.dx)
        # the particle may remove a few walkers at start; use the survivors
        self.reference = sim.swarm.alive / band_cells
        self.times = []
        self.heights = []
        self.bottoms = []
        self(sim)

    def __call__(self, sim):
        if sim.step_index % self.every:
            return
        self.times.append(sim.time)
        mask = footprint_columns(sim.system, self.dims, self.dx)
        self.heights.append(interface_height(sim.swarm.positions, self.dims, self.dx, self.reference, mask))
        if len(sim.system):
            # lowest point of the particle's bounding sphere
            self.bottoms.append(float(np.min(sim.system.x[:, 2] - sim.system.radius)))
        else:
            self.bottoms.append(np.nan)


def settling_stages(times, heights, bottoms, initial_height, window=5):
    """Split an interface record into approaching and interaction stages.

    The interaction stage starts when the lowest point of the particle
    reaches the initial interface height.  Returns a dict with the relative
    height change during approach and the smoothed interaction-stage series.
    """
    t = np.asarray(times)
    h = np.asarray(heights)
    b = np.asarray(bottoms)
    hit = np.flatnonzero(b <= initial_height)
    k = int(hit[0]) if len(hit) else len(t)
    approach = h[: max(k, 1)]
    change = float(np.max(np.abs(approach - initial_height)) / initial_height)
    inter = h[k:]
    if len(inter) >= window:
        smooth = np.convolve(inter, np.ones(window) / window, mode="valid")
    else:
        smooth = inter
    return {"onset_index": k, "onset_time": float(t[k]) if k < len(t) else float("nan"),
            "approach_change": change, "interaction": inter, "smoothed": smooth}


def oscillator_config(R=5.0, scale=1.0, count=50, walkers=2_000_000, steps=20000, seed=0, shape=None, file=None,
                      directory="runs/oscillator", amplitude=4.0, period=5000.0, time_unit="dem_steps", tau=None,
                      dem_substeps=100, density=2500.0, profile_every=20):
    """Particles shaken horizontally in a box with a thin solute band across its middle.

    Lengths are in lattice cells of 1 mm: the box is ``24R x 24R x 36R`` and
    particles are scaled to the volume of a sphere of radius ``R``.
    ``scale`` multiplies every length; ``scale=0.5`` is the 1/8-volume desk
    case.  The band is one cell thick.
    """
    dx = 1e-3
    r = R * scale
    dims = tuple(int(round(v * r)) for v in (24, 24, 36))
    Lx, Ly, Lz = (n * dx for n in dims)
    zc = 0.5 * Lz
    if file is None and shape is None:
        shape = f"sphere {r * dx!r}"
    return replace(
        SimulationConfig(),
        domain=dict(dims=dims, dx=dx, boundary=("periodic", "periodic", "wall")),
        time=dict(dt_lbm=2e-4, steps=steps, dem_substeps=dem_substeps),
        fluid=dict(rho=WATER_RHO, mu=None if tau else WATER_MU, tau=tau),
        solute=dict(D=2e-9, m_s=1.25e-7, walkers=walkers, source="band", band_lo=(0.0, 0.0, zc - 0.5 * dx),
                    band_hi=(Lx, Ly, zc + 0.5 * dx), placement="random", velocity="lattice"),
        particles=dict(file=file, shape=shape, equivalent_radius=r * dx, count=count, density=density,
                       placement="random", random_orientation=True),
        contact=dict(k_n=1e2, k_t=5e1, eta_n=0.05, eta_t=0.0, mu_s=0.3),
        forcing=dict(gravity=(0.0, 0.0, 0.0), buoyancy=True, oscillation_amplitude=amplitude,
                     oscillation_period=period, oscillation_time_unit=time_unit, oscillation_direction=(1.0, 0.0, 0.0)),
        output=dict(directory=directory, profile_every=profile_every, profile_axes=("z",), series_every=1, audit_every=100),
        run=dict(seed=seed, name="oscillator"),
    )


SCENARIOS = {
    "diffusion": diffusion_config,
    "advection": advection_config,
    "settling": settling_config,
    "oscillator": oscillator_config,
}


def run_scenario(name, **kw):
    cfg = SCENARIOS[name](**kw)
    return Simulation(cfg).run()
