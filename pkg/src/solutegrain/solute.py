"""Random-walk solute transport around moving Metaball particles.

Each walker carries a fixed mass ``m_s``; the walker count is never changed
after the initial pruning, so solute mass is conserved exactly.  A step is a
drift by the interpolated fluid velocity plus a Gaussian displacement of
variance ``2 D dt`` per axis, followed by resolution against particles:

* out -> out and in -> out moves are accepted;
* out -> in moves are specularly reflected at the surface (reverted when the
  reflected point is still interior);
* in -> in walkers (overrun by a moving particle) are pushed to the surface
  and re-placed uniformly in a ball of radius ``sqrt(2 D dt)`` around the
  exit point.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .metaball import (
    Pose,
    intersect_trajectories,
    push_to_surface_batch,
    reflect_vectors,
)

log = logging.getLogger(__name__)

MAX_REFILL_TRIES = 20


class SoluteError(RuntimeError):
    pass


@dataclass
class Domain:
    """Box ``[0, lengths)`` with per-axis rule ``'periodic'`` or ``'reflect'``."""

    lengths: np.ndarray
    rules: tuple = ("periodic", "periodic", "periodic")

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, float)
        for r in self.rules:
            if r not in ("periodic", "reflect"):
                raise ValueError(f"unknown domain rule {r!r}")

    @property
    def periodic(self):
        return np.array([r == "periodic" for r in self.rules])

    def apply(self, x):
        """Wrap or mirror positions back into the box (in place)."""
        for a, rule in enumerate(self.rules):
            L = self.lengths[a]
            col = x[:, a]
            if rule == "periodic":
                np.mod(col, L, out=col)
                # mod can return L for tiny negative inputs
                col[col >= L] = 0.0
            else:
                col = np.mod(col, 2 * L)
                col = np.where(col > L, 2 * L - col, col)
                x[:, a] = col
        return x

    def min_image(self, d):
        for a in range(3):
            if self.rules[a] == "periodic":
                d[..., a] -= self.lengths[a] * np.round(d[..., a] / self.lengths[a])
        return d


@dataclass
class StepEvents:
    type_ii: int = 0
    type_iii: int = 0
    type_iv: int = 0
    reverted: int = 0
    intersection_failures: int = 0
    refill_nudged: int = 0

    def add(self, other):
        for k in self.__dataclass_fields__:
            setattr(self, k, getattr(self, k) + getattr(other, k))


@dataclass
class WalkerSwarm:
    positions: np.ndarray
    m_s: float
    D: float
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    initial_count: int = -1
    removed_at_init: int = 0

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=float).reshape(-1, 3)
        if self.initial_count < 0:
            self.initial_count = len(self.positions)
        if self.D < 0:
            raise ValueError("diffusion coefficient must be non-negative")

    @property
    def alive(self):
        return len(self.positions)

    @property
    def total_mass(self):
        return self.m_s * self.alive


# ---------------------------------------------------------------------------
# velocity sampling


@njit(cache=True)
def _trilinear(pos, u, dx, periodic, out):
    _, nx, ny, nz = u.shape
    n = pos.shape[0]
    dims = (nx, ny, nz)
    i0 = np.empty(3, np.int64)
    i1 = np.empty(3, np.int64)
    fr = np.empty(3)
    for s in range(n):
        for a in range(3):
            g = pos[s, a] / dx - 0.5
            b = np.floor(g)
            t = g - b
            lo = int(b)
            hi = lo + 1
            na = dims[a]
            if periodic[a]:
                lo %= na
                hi %= na
            else:
                if lo < 0:
                    lo = 0
                    hi = 0
                    t = 0.0
                elif hi > na - 1:
                    lo = na - 1
                    hi = na - 1
                    t = 0.0
            i0[a] = lo
            i1[a] = hi
            fr[a] = t
        for c in range(3):
            acc = 0.0
            for cx in range(2):
                wx = fr[0] if cx else 1.0 - fr[0]
                ix = i1[0] if cx else i0[0]
                for cy in range(2):
                    wy = fr[1] if cy else 1.0 - fr[1]
                    iy = i1[1] if cy else i0[1]
                    for cz in range(2):
                        wz = fr[2] if cz else 1.0 - fr[2]
                        iz = i1[2] if cz else i0[2]
                        acc += wx * wy * wz * u[c, ix, iy, iz]
            out[s, c] = acc


class LatticeVelocity:
    """Trilinear interpolation of a lattice velocity field (SI units)."""

    def __init__(self, lattice):
        self.lattice = lattice

    def __call__(self, pos):
        out = np.empty((len(pos), 3))
        lat = self.lattice
        _trilinear(np.ascontiguousarray(pos), lat.u, lat.dx, lat.periodic, out)
        return out * lat.velocity_scale


class UniformVelocity:
    def __init__(self, u):
        self.u = np.asarray(u, float)

    def __call__(self, pos):
        return np.broadcast_to(self.u, (len(pos), 3)).copy()


def step_walkers(swarm, velocity_sampler, dt):
    """Proposed positions ``x + u(x) dt + z sqrt(2 D dt)``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = swarm.positions
    prop = x.copy()
    if velocity_sampler is not None:
        prop += velocity_sampler(x) * dt
    if swarm.D > 0:
        prop += swarm.rng.standard_normal(x.shape) * np.sqrt(2.0 * swarm.D * dt)
    return prop


# ---------------------------------------------------------------------------
# walker-particle resolution


def _pose_near(system, p, shift=None):
    x = system.x[p] if shift is None else system.x[p] + shift
    return Pose(x, system.q[p])


def _candidates(system, pts_list, domain, pad):
    """Per particle, the walker indices with any of ``pts_list`` within its bounding sphere."""
    out = []
    for p in range(len(system)):
        reach = system.radius[p] + pad
        hit = np.zeros(len(pts_list[0]), dtype=bool)
        for pts in pts_list:
            d = domain.min_image(pts - system.x[p])
            hit |= np.einsum("ij,ij->i", d, d) < reach * reach
        out.append(np.flatnonzero(hit))
    return out


class NearMap:
    """Cell map of the bounding spheres of particles used as a walker broad phase."""

    def __init__(self, system, domain, cell):
        self.cell = cell
        self.dims = np.maximum(np.ceil(domain.lengths / cell).astype(int), 1)
        self.count = np.zeros(self.dims, dtype=np.int32)
        self.first = np.full(self.dims, -1, dtype=np.int64)
        self.domain = domain
        for p in range(len(system)):
            c = system.x[p]
            r = system.radius[p] + cell
            lo = np.floor((c - r) / cell).astype(int)
            hi = np.floor((c + r) / cell).astype(int)
            axes = []
            for a in range(3):
                idx = np.arange(lo[a], hi[a] + 1)
                if domain.rules[a] == "periodic":
                    idx = np.unique(idx % self.dims[a])
                else:
                    idx = idx[(idx >= 0) & (idx < self.dims[a])]
                axes.append(idx)
            sub = np.ix_(*axes)
            self.first[sub] = np.where(self.count[sub] == 0, p, self.first[sub])
            self.count[sub] += 1

    def lookup(self, pts):
        c = np.empty(len(pts), np.int32)
        f = np.empty(len(pts), np.int64)
        _lookup(np.ascontiguousarray(pts), self.cell, self.domain.periodic, self.count, self.first, c, f)
        return c, f


@njit(cache=True)
def _lookup(pts, cell, periodic, count, first, c_out, f_out):
    dims = count.shape
    for s in range(pts.shape[0]):
        ii = 0
        jj = 0
        kk = 0
        for a in range(3):
            k = int(np.floor(pts[s, a] / cell))
            na = dims[a]
            if periodic[a]:
                k %= na
            elif k < 0:
                k = 0
            elif k > na - 1:
                k = na - 1
            if a == 0:
                ii = k
            elif a == 1:
                jj = k
            else:
                kk = k
        c_out[s] = count[ii, jj, kk]
        f_out[s] = first[ii, jj, kk]


def _near_walkers(system, domain, pts_old, pts_new, cell):
    """Per particle, indices of walkers whose old or new point is near it."""
    nm = NearMap(system, domain, cell)
    c0, f0 = nm.lookup(pts_old)
    c1, f1 = nm.lookup(pts_new)
    multi = np.flatnonzero((c0 > 1) | (c1 > 1) | ((c0 == 1) & (c1 == 1) & (f0 != f1)))
    P = len(system)
    groups = [[] for _ in range(P)]
    for c, f in ((c0, f0), (c1, f1)):
        single = np.flatnonzero(c == 1)
        order = np.argsort(f[single], kind="stable")
        single = single[order]
        bounds = np.searchsorted(f[single], np.arange(P + 1))
        for p in range(P):
            groups[p].append(single[bounds[p] : bounds[p + 1]])
    if len(multi):
        sub = _candidates(system, [pts_old[multi], pts_new[multi]], domain, cell)
        for p in range(len(system)):
            groups[p].append(multi[sub[p]])
    return [np.unique(np.concatenate(g)) if g else np.zeros(0, int) for g in groups]


def _local(system, p, pts, domain):
    """Positions relative to particle ``p`` under the minimum-image convention, in world frame near x_p."""
    return system.x[p] + domain.min_image(pts - system.x[p])


def _field_at(system, p, pts_local):
    pose = _pose_near(system, p)
    return system.shapes[p].field(pose.to_body(pts_local))


def classify_and_resolve(swarm, proposed, particles, domain, dt, dx=1.0):
    """Resolve proposed walker moves against particles and the domain.

    Returns ``(final_positions, StepEvents)``; the walker count never changes.
    """
    from .fsi import _as_system

    system = _as_system(particles)
    old = swarm.positions
    new = proposed.copy()
    ev = StepEvents()
    if len(system):
        groups = _near_walkers(system, domain, old, new, cell=max(dx, 1e-12))
        moved = []
        for p in range(len(system)):
            idx = groups[p]
            if len(idx) == 0:
                continue
            moved.append(_resolve_particle(swarm, system, p, idx, old, new, domain, dt, dx, ev))
        # walkers moved while resolving one particle may have landed in another
        moved = np.unique(np.concatenate(moved)) if moved else np.zeros(0, int)
        for _ in range(3):
            if len(moved) == 0:
                break
            bad = moved[interior_walkers(system, new[moved], domain)]
            if len(bad) == 0:
                break
            for p in range(len(system)):
                sel = bad[_owner_of(system, p, new[bad], domain)]
                if len(sel):
                    _refill_walkers(swarm, system, p, sel, new, domain, dt, dx, ev)
            moved = bad
    domain.apply(new)
    return new, ev


def _owner_of(system, p, pts, domain):
    loc = _local(system, p, pts, domain)
    return _field_at(system, p, loc) > system.shapes[p].iso_value


def _resolve_particle(swarm, system, p, idx, old, new, domain, dt, dx, ev):
    shape = system.shapes[p]
    c = shape.iso_value
    pose = _pose_near(system, p)
    xo = _local(system, p, old[idx], domain)
    # proposals keep the displacement so that segments do not jump across the box
    xn = xo + (new[idx] - old[idx])
    fo = shape.field(pose.to_body(xo))
    fn = shape.field(pose.to_body(xn))
    in_o = fo > c
    in_n = fn > c
    ev.type_iii += int(np.sum(in_o & ~in_n))
    # type IV: specular reflection
    m4 = ~in_o & in_n
    if m4.any():
        k = idx[m4]
        ev.type_iv += len(k)
        a, b = xo[m4], xn[m4]
        pts, ok = intersect_trajectories(shape, pose, a, b)
        res = a.copy()  # default: revert
        if ok.any():
            _, g = shape.field_grad(pose.to_body(pts[ok]))
            g = pose.rotate(g)
            gn = np.linalg.norm(g, axis=1)
            good = gn > 1e-12
            okk = np.flatnonzero(ok)[good]
            t_r = reflect_vectors(b[okk] - pts[okk], g[good])
            cand = pts[okk] + t_r
            still = shape.field(pose.to_body(cand)) > c
            res[okk[~still]] = cand[~still]
            ev.reverted += int(np.sum(still))
        ev.intersection_failures += int(np.sum(~ok))
        ev.reverted += int(np.sum(~ok))
        new[k] = old[k] + (res - a)
    # type II: overrun by the particle
    m2 = in_o & in_n
    if m2.any():
        _refill_walkers(swarm, system, p, idx[m2], new, domain, dt, dx, ev, start=old[idx[m2]])
    return idx[m4 | m2]


def _refill_walkers(swarm, system, p, sel, new, domain, dt, dx, ev, start=None):
    """Push interior walkers out of particle ``p`` and scatter them near the exit point."""
    shape = system.shapes[p]
    c = shape.iso_value
    pose = _pose_near(system, p)
    src = new[sel] if start is None else start
    x = _local(system, p, src, domain)
    ev.type_ii += len(sel)
    surf, ok = push_to_surface_batch(shape, pose, x)
    if not ok.all():
        # fall back to the radial ray from the centre
        bad = np.flatnonzero(~ok)
        d = x[bad] - system.x[p]
        nrm = np.linalg.norm(d, axis=1, keepdims=True)
        d = np.where(nrm > 0, d / np.maximum(nrm, 1e-300), np.array([0.0, 0.0, 1.0]))
        far = system.x[p] + d * system.radius[p] * 1.05
        pts, _ = intersect_trajectories(shape, pose, far, x[bad])
        surf[bad] = pts
    radius = np.sqrt(2.0 * swarm.D * dt)
    placed = np.zeros(len(sel), dtype=bool)
    out = surf.copy()
    if radius > 0:
        for _ in range(MAX_REFILL_TRIES):
            todo = np.flatnonzero(~placed)
            if len(todo) == 0:
                break
            v = swarm.rng.standard_normal((len(todo), 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            r = radius * swarm.rng.random(len(todo)) ** (1.0 / 3.0)
            cand = surf[todo] + v * r[:, None]
            ext = shape.field(pose.to_body(cand)) <= c
            out[todo[ext]] = cand[ext]
            placed[todo[ext]] = True
    todo = np.flatnonzero(~placed)
    if len(todo):
        _, g = shape.field_grad(pose.to_body(surf[todo]))
        g = pose.rotate(g)
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        outward = -g / np.maximum(gn, 1e-300)
        out[todo] = surf[todo] + 1e-3 * dx * outward
        ev.refill_nudged += len(todo)
    new[sel] = out


def _broad_cell(system, domain):
    return max(float(np.min(system.radius)), float(np.max(domain.lengths)) / 256.0, 1e-12)


def interior_walkers(particles, pts, domain, slack=0.0):
    """Indices of walkers with ``f > iso_value + slack`` for any particle."""
    from .fsi import _as_system

    system = _as_system(particles)
    if len(system) == 0 or len(pts) == 0:
        return np.zeros(0, int)
    groups = _near_walkers(system, domain, pts, pts, _broad_cell(system, domain))
    bad = []
    for p in range(len(system)):
        near = groups[p]
        if len(near) == 0:
            continue
        f = _field_at(system, p, _local(system, p, pts[near], domain))
        bad.append(near[f > system.shapes[p].iso_value + slack])
    return np.unique(np.concatenate(bad)) if bad else np.zeros(0, int)


def max_exterior_violation(particles, pts, domain):
    """Largest ``f - c`` over walkers near particles (negative when all exterior).

    Only walkers within one broad-phase cell of a bounding sphere are
    examined; ``-inf`` means there were none.
    """
    from .fsi import _as_system

    system = _as_system(particles)
    worst = -np.inf
    if len(system) == 0 or len(pts) == 0:
        return worst
    groups = _near_walkers(system, domain, pts, pts, _broad_cell(system, domain))
    for p in range(len(system)):
        near = groups[p]
        if len(near) == 0:
            continue
        f = _field_at(system, p, _local(system, p, pts[near], domain))
        worst = max(worst, float(np.max(f - system.shapes[p].iso_value)))
    return worst


# ---------------------------------------------------------------------------
# initialisation and deposition


def initialize_band(region, n_walkers, particles, domain, m_s, D, rng=None, mode="random"):
    """Walkers spread over the box ``region = (lo, hi)``; interior walkers are removed."""
    rng = np.random.default_rng() if rng is None else rng
    lo, hi = (np.asarray(v, float) for v in region)
    if np.any(hi < lo):
        raise ValueError("region upper corner below lower corner")
    if mode == "random":
        pts = lo + (hi - lo) * rng.random((n_walkers, 3))
    elif mode == "grid":
        ext = hi - lo
        vol = np.prod(np.where(ext > 0, ext, 1.0))
        k = [max(1, int(round(e * (n_walkers / vol) ** (1 / 3)))) if e > 0 else 1 for e in ext]
        axes = [lo[a] + (np.arange(k[a]) + 0.5) * (ext[a] / k[a]) for a in range(3)]
        g = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([a.ravel() for a in g], axis=1)
    else:
        raise ValueError(f"unknown placement mode {mode!r}")
    pts = domain.apply(pts)
    bad = interior_walkers(particles, pts, domain) if particles is not None else np.zeros(0, int)
    keep = np.ones(len(pts), dtype=bool)
    keep[bad] = False
    survivors = pts[keep]
    if len(survivors) == 0:
        raise SoluteError("no walker survived initial pruning: band lies inside particles")
    if len(bad):
        log.info("removed %d walkers initialised inside particles", len(bad))
    return WalkerSwarm(survivors, m_s, D, rng, removed_at_init=len(bad))


def initialize_point_source(x0, n_walkers, m_s, D, rng=None):
    rng = np.random.default_rng() if rng is None else rng
    return WalkerSwarm(np.repeat(np.asarray(x0, float)[None, :], n_walkers, 0), m_s, D, rng)


@dataclass
class ConcentrationField:
    counts: np.ndarray
    m_s: float
    dx: float

    @property
    def concentration(self):
        return self.m_s * self.counts / self.dx**3

    @property
    def total_mass(self):
        return self.m_s * int(self.counts.sum())


def cell_indices(pts, dims, dx):
    idx = np.floor(pts / dx).astype(np.int64)
    for a in range(3):
        np.clip(idx[:, a], 0, dims[a] - 1, out=idx[:, a])
    return idx


def deposit(swarm, dims, dx):
    """Bin walkers into lattice cells: ``C = m_s n_s / dx^3``."""
    dims = tuple(int(d) for d in dims)
    counts = np.zeros(dims, dtype=np.int64)
    if swarm.alive:
        idx = cell_indices(swarm.positions, dims, dx)
        flat = np.ravel_multi_index(idx.T, dims)
        counts = np.bincount(flat, minlength=int(np.prod(dims))).reshape(dims)
    return ConcentrationField(counts, swarm.m_s, dx)


def axis_counts(pts, axis, n_bins, dx):
    idx = np.clip(np.floor(pts[:, axis] / dx).astype(np.int64), 0, n_bins - 1)
    return np.bincount(idx, minlength=n_bins)


def axis_profile(swarm, axis, n_bins, dx):
    """Solute mass per unit length along ``axis`` (walker mass per slab / dx)."""
    return swarm.m_s * axis_counts(swarm.positions, axis, n_bins, dx) / dx
