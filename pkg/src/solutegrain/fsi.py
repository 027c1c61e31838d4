"""Two-way coupling between lattice fluid and Metaball particles.

Nodes inside a particle's outer surface are solid; fluid nodes with a solid
lattice neighbour carry boundary links.  Each link stores its fraction ``q``
along the lattice direction, the wall point and the rigid-body wall
velocity.  After streaming, :func:`ibb_apply` rewrites the populations that
arrive at boundary nodes from solid neighbours with an interpolated
bounce-back rule; :func:`momentum_exchange` converts the populations crossing
each link into particle forces and torques; :func:`refill` initialises nodes
uncovered by moving particles.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

from .lbm import BOUNDARY, E, OPP, SOLID, W, moments
from .metaball import _link_fraction

log = logging.getLogger(__name__)

LINK_TOL = 1e-6


@dataclass
class BoundaryLink:
    """One cut lattice link from fluid node ``fluid_node`` along ``direction``."""

    fluid_node: tuple
    direction: int
    q: float
    wall_point: np.ndarray
    owner: int
    wall_velocity: np.ndarray


@dataclass
class LinkSet:
    """All cut links as parallel arrays (lattice units except ``wall_point``/``arm``)."""

    node: np.ndarray  # flat index of the fluid node
    direction: np.ndarray
    q: np.ndarray
    owner: np.ndarray
    ff: np.ndarray  # flat index of the next fluid node away from the wall, -1 if none
    wall_point: np.ndarray  # SI
    arm: np.ndarray  # wall point relative to the owner's centre (SI, minimum image)
    wall_velocity: np.ndarray  # lattice units

    def __len__(self):
        return len(self.node)

    @classmethod
    def empty(cls):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), np.zeros(0), z.copy(), z.copy(), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)))

    def record(self, k, dims):
        idx = np.unravel_index(int(self.node[k]), dims)
        return BoundaryLink(
            tuple(int(a) for a in idx), int(self.direction[k]), float(self.q[k]), self.wall_point[k].copy(),
            int(self.owner[k]), self.wall_velocity[k].copy(),
        )


@dataclass
class Classification:
    kind: np.ndarray
    owner: np.ndarray  # particle index per cell, -1 for fluid
    links: LinkSet


# ---------------------------------------------------------------------------
# classification


@njit(cache=True)
def _find_links(owner, cand, periodic):
    nx, ny, nz = owner.shape
    n = cand.shape[0]
    out_node = np.empty(n * 18, np.int64)
    out_dir = np.empty(n * 18, np.int64)
    out_own = np.empty(n * 18, np.int64)
    out_ff = np.empty(n * 18, np.int64)
    m = 0
    for s in range(n):
        c = cand[s]
        x = c // (ny * nz)
        y = (c // nz) % ny
        z = c % nz
        if owner[x, y, z] >= 0:
            continue
        for i in range(1, 19):
            p = (x + E[i, 0], y + E[i, 1], z + E[i, 2])
            ok = True
            q0 = p[0]
            q1 = p[1]
            q2 = p[2]
            if q0 < 0 or q0 >= nx:
                if periodic[0]:
                    q0 %= nx
                else:
                    ok = False
            if q1 < 0 or q1 >= ny:
                if periodic[1]:
                    q1 %= ny
                else:
                    ok = False
            if q2 < 0 or q2 >= nz:
                if periodic[2]:
                    q2 %= nz
                else:
                    ok = False
            if not ok:
                continue
            o = owner[q0, q1, q2]
            if o < 0:
                continue
            # next node on the fluid side
            f0 = x - E[i, 0]
            f1 = y - E[i, 1]
            f2 = z - E[i, 2]
            ffi = -1
            good = True
            if f0 < 0 or f0 >= nx:
                if periodic[0]:
                    f0 %= nx
                else:
                    good = False
            if f1 < 0 or f1 >= ny:
                if periodic[1]:
                    f1 %= ny
                else:
                    good = False
            if f2 < 0 or f2 >= nz:
                if periodic[2]:
                    f2 %= nz
                else:
                    good = False
            if good and owner[f0, f1, f2] < 0:
                ffi = (f0 * ny + f1) * nz + f2
            out_node[m] = c
            out_dir[m] = i
            out_own[m] = o
            out_ff[m] = ffi
            m += 1
    return out_node[:m], out_dir[:m], out_own[:m], out_ff[:m]


def _min_image(rel, lengths, periodic):
    for a in range(3):
        if periodic[a]:
            rel[..., a] -= lengths[a] * np.round(rel[..., a] / lengths[a])
    return rel


def _as_system(particles):
    from .dem import ParticleSystem

    if isinstance(particles, ParticleSystem):
        return particles
    return ParticleSystem(list(particles))


def _particle_cells(field, system, p):
    """Flat indices and relative positions of the nodes inside particle ``p``'s bounding box."""
    dx = field.dx
    dims = np.array(field.dims)
    periodic = field.periodic
    c = system.x[p]
    Rb = system.radius[p] + dx
    lo = np.floor((c - Rb) / dx - 0.5).astype(int)
    hi = np.ceil((c + Rb) / dx - 0.5).astype(int)
    axes = []
    for a in range(3):
        idx = np.arange(lo[a], hi[a] + 1)
        if not periodic[a]:
            idx = idx[(idx >= 0) & (idx < dims[a])]
        axes.append(idx)
    I, J, K = np.meshgrid(*axes, indexing="ij")
    raw = np.stack([I.ravel(), J.ravel(), K.ravel()], axis=1)
    rel = (raw + 0.5) * dx - c
    wrapped = raw % dims
    flat = np.ravel_multi_index(wrapped.T, field.dims)
    return flat, rel


def classify_nodes(field, particles, velocities=True):
    """Mark solid and boundary nodes and build the cut-link set.

    A node is solid when ``f > iso_value`` for some particle (the first
    particle wins where bodies overlap).  Solid nodes receive the local
    rigid-body velocity in ``field.u`` so that interpolation stencils reaching
    into particles see the wall motion.
    """
    system = _as_system(particles)
    dims = field.dims
    owner = np.full(dims, -1, dtype=np.int64)
    flat_owner = owner.reshape(-1)
    lengths = np.array(dims) * field.dx
    periodic = field.periodic
    cand = []
    if len(system):
        R = system.rotations()
        w = system.omega()
    for p in range(len(system)):
        flat, rel = _particle_cells(field, system, p)
        f = system.shapes[p].field(rel @ R[p])
        inside = f > system.shapes[p].iso_value
        sel = flat[inside]
        free = flat_owner[sel] < 0
        sel = sel[free]
        if not inside.any():
            log.warning("particle %d has no interior lattice node; it couples through links only", system.pid[p])
        flat_owner[sel] = p
        if velocities and len(sel):
            r = rel[inside][free]
            vel = (system.v[p] + np.cross(w[p], r)) / field.velocity_scale
            for a in range(3):
                field.u[a].reshape(-1)[sel] = vel[:, a]
            field.rho.reshape(-1)[sel] = 1.0
        cand.append(flat)
    kind = np.zeros(dims, dtype=np.int8)
    kind[owner >= 0] = SOLID
    if not cand:
        return Classification(kind, owner, LinkSet.empty())
    cand = np.unique(np.concatenate(cand))
    node, direction, own, ff = _find_links(owner, cand, periodic)
    kind.reshape(-1)[node] = BOUNDARY
    n = len(node)
    q = np.empty(n)
    arm = np.empty((n, 3))
    pos = (np.stack(np.unravel_index(node, dims), axis=1) + 0.5) * field.dx
    for p in np.unique(own):
        m = own == p
        rel = _min_image(pos[m] - system.x[p], lengths, periodic)
        d = E[direction[m]] * field.dx
        Rp = R[p]
        shape = system.shapes[p]
        qp = _link_fraction(np.ascontiguousarray(rel @ Rp), np.ascontiguousarray(d @ Rp),
                            shape.control_points, shape.weights, shape.iso_value, LINK_TOL)
        q[m] = qp
        arm[m] = rel + qp[:, None] * d
    if n:
        wv = (system.v[own] + np.cross(w[own], arm)) / field.velocity_scale
        wp = system.x[own] + arm
    else:
        wv = np.zeros((0, 3))
        wp = np.zeros((0, 3))
    links = LinkSet(node, direction, q, own, ff, wp, arm, wv)
    return Classification(kind, owner, links)


def apply_classification(field, cls):
    field.kind[...] = cls.kind


# ---------------------------------------------------------------------------
# interpolated bounce-back


@njit(cache=True)
def _feq(i, rho, ux, uy, uz):
    eu = E[i, 0] * ux + E[i, 1] * uy + E[i, 2] * uz
    return W[i] * rho * (1.0 + 3.0 * eu + 4.5 * eu * eu - 1.5 * (ux * ux + uy * uy + uz * uz))


@njit(cache=True)
def _ibb(Gpost, G, rho, u, node, dirs, q, uw, ff, gout, gin):
    nx, ny, nz = rho.shape
    fallback = 0
    for k in range(node.shape[0]):
        n = node[k]
        x = n // (ny * nz)
        y = (n // nz) % ny
        z = n % nz
        i = dirs[k]
        o = OPP[i]
        rf = rho[x, y, z]
        ufx = u[0, x, y, z]
        ufy = u[1, x, y, z]
        ufz = u[2, x, y, z]
        wx = uw[k, 0]
        wy = uw[k, 1]
        wz = uw[k, 2]
        g0 = Gpost[i, x, y, z]
        g = g0
        if ff[k] >= 0:
            m = ff[k]
            a = m // (ny * nz)
            b = (m // nz) % ny
            c = m % nz
            ffx = u[0, a, b, c]
            ffy = u[1, a, b, c]
            ffz = u[2, a, b, c]
            qq = q[k]
            if qq <= 0.5:
                sx = 2 * qq * ufx + (1 - 2 * qq) * ffx
                sy = 2 * qq * ufy + (1 - 2 * qq) * ffy
                sz = 2 * qq * ufz + (1 - 2 * qq) * ffz
            else:
                sx = (1 - qq) / qq * ufx + (2 * qq - 1) / qq * wx
                sy = (1 - qq) / qq * ufy + (2 * qq - 1) / qq * wy
                sz = (1 - qq) / qq * ufz + (2 * qq - 1) / qq * wz
            a1 = (1 - qq) / (1 + qq)
            a2 = 2 * qq / (1 + qq)
            dx_ = sx / 3 + 2.0 / 3.0 * (a1 * ffx + a2 * wx)
            dy_ = sy / 3 + 2.0 / 3.0 * (a1 * ffy + a2 * wy)
            dz_ = sz / 3 + 2.0 / 3.0 * (a1 * ffz + a2 * wz)
            g = g + _feq(i, rf, dx_, dy_, dz_) - _feq(i, rf, ufx, ufy, ufz)
        else:
            fallback += 1
        gn = g + 6.0 * W[o] * rf * (E[o, 0] * wx + E[o, 1] * wy + E[o, 2] * wz)
        G[o, x, y, z] = gn
        # the population that actually left the fluid node
        gout[k] = g0
        gin[k] = gn
    return fallback


@dataclass
class LinkExchange:
    """Populations leaving (``out``) and re-entering (``back``) the fluid per link."""

    out: np.ndarray
    back: np.ndarray
    fallback: int = 0


def ibb_apply(field, links):
    """Overwrite populations streamed out of solid nodes at every boundary link.

    Must run after streaming and before the macroscopic update, while
    ``field.rho``/``field.u`` still hold the moments of the collided state.
    """
    n = len(links)
    gout = np.zeros(n)
    gin = np.zeros(n)
    if n:
        fb = _ibb(field.Gpost, field.G, field.rho, field.u, links.node, links.direction, links.q,
                  np.ascontiguousarray(links.wall_velocity), links.ff, gout, gin)
        if fb:
            log.debug("%d boundary links without a second fluid node used plain bounce-back", fb)
    else:
        fb = 0
    return LinkExchange(gout, gin, fb)


def momentum_exchange(field, links, exchange, n_particles):
    """Hydrodynamic force and torque (SI) on each particle.

    Galilean-invariant momentum exchange: per link
    ``dP = (e_i - u_w) g_out - (e_opp - u_w) g_back``.
    """
    F = np.zeros((n_particles, 3))
    T = np.zeros((n_particles, 3))
    if len(links) == 0:
        return F, T
    e = E[links.direction].astype(float)
    uw = links.wall_velocity
    go = exchange.out[:, None]
    gb = exchange.back[:, None]
    dP = (e - uw) * go - (-e - uw) * gb
    tq = np.cross(links.arm, dP)
    for a in range(3):
        F[:, a] = np.bincount(links.owner, weights=dP[:, a], minlength=n_particles)
        T[:, a] = np.bincount(links.owner, weights=tq[:, a], minlength=n_particles)
    s = field.force_scale
    # torque arm is in SI metres; dP in lattice force units
    return F * s, T * s


# ---------------------------------------------------------------------------
# refill


@njit(cache=True)
def _refill(G, rho, old_kind, nodes, uw, periodic, rho_out):
    nx, ny, nz = old_kind.shape
    g0 = np.empty(19)
    for s in range(nodes.shape[0]):
        n = nodes[s]
        x = n // (ny * nz)
        y = (n // nz) % ny
        z = n % nz
        for i in range(19):
            g0[i] = G[i, x, y, z]
        # density from neighbours that were fluid during the step
        rsum = 0.0
        cnt = 0
        valid = np.zeros(19, np.bool_)
        for i in range(1, 19):
            a = x + E[i, 0]
            b = y + E[i, 1]
            c = z + E[i, 2]
            ok = True
            if a < 0 or a >= nx:
                if periodic[0]:
                    a %= nx
                else:
                    ok = False
            if b < 0 or b >= ny:
                if periodic[1]:
                    b %= ny
                else:
                    ok = False
            if c < 0 or c >= nz:
                if periodic[2]:
                    c %= nz
                else:
                    ok = False
            if ok and old_kind[a, b, c] != 1:
                valid[i] = True
                cnt += 1
                rsum += rho[a, b, c]
        r0 = rsum / cnt if cnt > 0 else 1.0
        wx = uw[s, 0]
        wy = uw[s, 1]
        wz = uw[s, 2]
        for i in range(19):
            if i > 0 and valid[i]:
                G[i, x, y, z] = g0[OPP[i]] + 6.0 * W[i] * r0 * (E[i, 0] * wx + E[i, 1] * wy + E[i, 2] * wz)
            else:
                G[i, x, y, z] = _feq(i, r0, wx, wy, wz)
        rho_out[s] = r0
    return 0


def refill(field, old_kind, old_owner, new_cls, particles):
    """Initialise nodes that were solid and are now fluid.

    Each population whose opposite partner was streamed in from a node that
    was fluid during the step is bounced back from that partner with the
    moving-wall correction; the remaining populations take the equilibrium at
    the reference density and the rigid-body velocity of the particle that
    uncovered the node.  Returns the flat indices of refilled nodes.
    """
    system = _as_system(particles)
    fresh = np.flatnonzero((old_kind.reshape(-1) == SOLID) & (new_cls.kind.reshape(-1) != SOLID))
    if len(fresh) == 0:
        return fresh
    own = old_owner.reshape(-1)[fresh]
    pos = (np.stack(np.unravel_index(fresh, field.dims), axis=1) + 0.5) * field.dx
    lengths = np.array(field.dims) * field.dx
    uw = np.zeros((len(fresh), 3))
    if len(system):
        w = system.omega()
        has = own >= 0
        o = own[has]
        rel = _min_image(pos[has] - system.x[o], lengths, field.periodic)
        uw[has] = (system.v[o] + np.cross(w[o], rel)) / field.velocity_scale
    r0 = np.empty(len(fresh))
    _refill(field.G, field.rho, old_kind, fresh, uw, field.periodic, r0)
    idx = np.unravel_index(fresh, field.dims)
    rho, u = moments(field.G[(slice(None),) + idx], field.acceleration_lattice())
    field.rho[idx] = rho
    for a in range(3):
        field.u[a][idx] = u[a]
    return fresh


def solid_fraction(cls):
    return float(np.mean(cls.kind == SOLID))


def diagnostics_rows(step, forces, torques, n_links, n_refilled, pids):
    """Per-particle diagnostic rows for the coupling CSV."""
    rows = []
    for k, pid in enumerate(pids):
        rows.append([step, int(pid), *forces[k], *torques[k], n_links, n_refilled])
    return rows


DIAGNOSTIC_HEADER = ["step", "particle", "Fx", "Fy", "Fz", "Tx", "Ty", "Tz", "links", "refilled"]
