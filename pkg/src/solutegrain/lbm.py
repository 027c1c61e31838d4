"""D3Q19 single-relaxation-time lattice Boltzmann solver.

Distributions are stored as ``G[i, x, y, z]`` in lattice units (dx = dt = 1,
reference density 1).  Node ``(i, j, k)`` sits at the physical position
``((i, j, k) + 0.5) * dx`` so that every node is the centre of the cell that
the solute module bins walkers into.

One step is ``collide`` (BGK with velocity-shift forcing) followed by a pull
``stream`` that applies half-way bounce-back on non-periodic domain faces.
Particle boundary links are patched afterwards by :mod:`solutegrain.fsi`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

CS2 = 1.0 / 3.0

# D3Q19: rest, 6 face neighbours, 12 edge neighbours
E = np.array(
    [
        [0, 0, 0],
        [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1],
        [1, 1, 0], [-1, -1, 0], [1, -1, 0], [-1, 1, 0],
        [1, 0, 1], [-1, 0, -1], [1, 0, -1], [-1, 0, 1],
        [0, 1, 1], [0, -1, -1], [0, 1, -1], [0, -1, 1],
    ],
    dtype=np.int64,
)
W = np.array([1.0 / 3.0] + [1.0 / 18.0] * 6 + [1.0 / 36.0] * 12)
OPP = np.array([0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15, 18, 17], dtype=np.int64)
Q = 19

FLUID, SOLID, BOUNDARY = 0, 1, 2


class LatticeError(RuntimeError):
    """Raised when the fluid state becomes non-physical (NaN or rho <= 0)."""


def equilibrium(rho, u):
    """Second-order equilibrium populations.

    ``rho`` may be a scalar or an array of shape S and ``u`` then has shape
    (3,) + S; the result has shape (19,) + S.
    """
    rho = np.asarray(rho, dtype=float)
    u = np.asarray(u, dtype=float)
    eu = np.tensordot(E.astype(float), u, axes=(1, 0))
    uu = np.sum(u * u, axis=0)
    w = W.reshape((Q,) + (1,) * rho.ndim)
    return w * rho * (1.0 + eu / CS2 + eu**2 / (2 * CS2**2) - uu / (2 * CS2))


def moments(G, acceleration=None):
    """Density and velocity of populations ``G`` with shape (19,) + S.

    With a body acceleration the returned velocity carries the half-force
    correction of the velocity-shift scheme.
    """
    G = np.asarray(G, dtype=float)
    rho = G.sum(axis=0)
    if np.any(rho <= 0):
        raise LatticeError("non-positive density in moments()")
    mom = np.tensordot(E.T.astype(float), G, axes=(1, 0))
    u = mom / rho
    if acceleration is not None:
        a = np.asarray(acceleration, dtype=float).reshape((3,) + (1,) * rho.ndim)
        u = u + 0.5 * a
    return rho, u


@njit(cache=True)
def _feq_node(i, rho, ux, uy, uz):
    eu = E[i, 0] * ux + E[i, 1] * uy + E[i, 2] * uz
    return W[i] * rho * (1.0 + 3.0 * eu + 4.5 * eu * eu - 1.5 * (ux * ux + uy * uy + uz * uz))


EXF = E[:, 0].astype(np.float64)
EYF = E[:, 1].astype(np.float64)
EZF = E[:, 2].astype(np.float64)


@njit(cache=True, fastmath=True, error_model="numpy")
def _collide(G, Gpost, kind, rho, u, tau, ax, ay, az):
    """BGK collision using the stored moments of ``G``.

    ``u`` is the physical (half-force corrected) velocity; the equilibrium is
    evaluated at the shifted velocity ``u_bare + tau * a``.
    """
    nx, ny, nz = kind.shape
    omega = 1.0 / tau
    sx = (tau - 0.5) * ax
    sy = (tau - 0.5) * ay
    sz = (tau - 0.5) * az
    for x in range(nx):
        for y in range(ny):
            for i in range(19):
                ex = EXF[i]
                ey = EYF[i]
                ez = EZF[i]
                w = W[i]
                for z in range(nz):
                    ux = u[0, x, y, z] + sx
                    uy = u[1, x, y, z] + sy
                    uz = u[2, x, y, z] + sz
                    eu = ex * ux + ey * uy + ez * uz
                    usq = 1.5 * (ux * ux + uy * uy + uz * uz)
                    g = G[i, x, y, z]
                    Gpost[i, x, y, z] = g - omega * (g - w * rho[x, y, z] * (1.0 + 3.0 * eu + 4.5 * eu * eu - usq))
            for z in range(nz):
                if kind[x, y, z] == 1:
                    for i in range(19):
                        Gpost[i, x, y, z] = G[i, x, y, z]


@njit(cache=True)
def _bounce(Gpost, Gnew, i, x, y, z, wall, face_u):
    io = OPP[i]
    eu = E[i, 0] * face_u[wall, 0] + E[i, 1] * face_u[wall, 1] + E[i, 2] * face_u[wall, 2]
    if eu == 0.0:
        Gnew[i, x, y, z] = Gpost[io, x, y, z]
        return
    rho = 0.0
    for j in range(19):
        rho += Gpost[j, x, y, z]
    # moving-wall term for lids and velocity inlets
    Gnew[i, x, y, z] = Gpost[io, x, y, z] + 6.0 * W[i] * rho * eu


@njit(cache=True)
def _stream(Gpost, Gnew, periodic, face_u):
    """Pull streaming with half-way bounce-back on non-periodic faces."""
    _, nx, ny, nz = Gpost.shape
    for i in range(19):
        ex = E[i, 0]
        ey = E[i, 1]
        ez = E[i, 2]
        zlo = 1 if ez == 1 else 0
        zhi = nz - 1 if ez == -1 else nz
        for x in range(nx):
            sx = x - ex
            xwall = -1
            if sx < 0 or sx >= nx:
                if periodic[0]:
                    sx = sx % nx
                else:
                    xwall = 0 if sx < 0 else 1
            for y in range(ny):
                sy = y - ey
                wall = xwall
                if sy < 0 or sy >= ny:
                    if periodic[1]:
                        sy = sy % ny
                    elif wall < 0:
                        wall = 2 if sy < 0 else 3
                if wall >= 0:
                    for z in range(nz):
                        _bounce(Gpost, Gnew, i, x, y, z, wall, face_u)
                    continue
                for z in range(zlo, zhi):
                    Gnew[i, x, y, z] = Gpost[i, sx, sy, z - ez]
                if ez != 0:
                    z = 0 if ez == 1 else nz - 1
                    if periodic[2]:
                        Gnew[i, x, y, z] = Gpost[i, sx, sy, (z - ez) % nz]
                    else:
                        _bounce(Gpost, Gnew, i, x, y, z, 4 if ez == 1 else 5, face_u)


# fastmath without the no-NaN assumption so the density check below survives
@njit(cache=True, fastmath={"nsz", "arcp", "contract", "afn", "reassoc"}, error_model="numpy")
def _macros(G, kind, rho, u, ax, ay, az):
    """Store density and physical velocity of ``G`` at non-solid nodes.

    Returns the flat index of the first non-solid node whose density is not
    positive (or NaN), else -1.
    """
    nx, ny, nz = kind.shape
    r = np.empty(nz)
    mx = np.empty(nz)
    my = np.empty(nz)
    mz = np.empty(nz)
    bad = -1
    for x in range(nx):
        for y in range(ny):
            r[:] = 0.0
            mx[:] = 0.0
            my[:] = 0.0
            mz[:] = 0.0
            for i in range(19):
                ex = EXF[i]
                ey = EYF[i]
                ez = EZF[i]
                for z in range(nz):
                    g = G[i, x, y, z]
                    r[z] += g
                    mx[z] += g * ex
                    my[z] += g * ey
                    mz[z] += g * ez
            for z in range(nz):
                if kind[x, y, z] == 1:
                    continue
                rz = r[z]
                if not (rz > 0.0):
                    if bad < 0:
                        bad = (x * ny + y) * nz + z
                    continue
                rho[x, y, z] = rz
                u[0, x, y, z] = mx[z] / rz + 0.5 * ax
                u[1, x, y, z] = my[z] / rz + 0.5 * ay
                u[2, x, y, z] = mz[z] / rz + 0.5 * az
    return bad


# face order: -x, +x, -y, +y, -z, +z
FACE_NAMES = ("x-", "x+", "y-", "y+", "z-", "z+")


@dataclass
class LatticeField:
    """Fluid state on a regular D3Q19 grid.

    ``tau`` is in lattice units; ``dx``/``dt`` convert to SI.  ``boundary`` is
    one of ``'periodic'`` or ``'wall'`` per axis; ``face_velocity`` holds the
    prescribed wall velocity (SI) of each face in :data:`FACE_NAMES` order and
    turns a wall into a moving lid or a velocity inlet.
    """

    dims: tuple
    dx: float = 1.0
    dt: float = 1.0
    tau: float = 1.0
    rho_ref: float = 1.0
    boundary: tuple = ("periodic", "periodic", "periodic")
    face_velocity: np.ndarray = None
    acceleration: np.ndarray = None
    G: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.tau <= 0.5:
            raise ValueError(f"tau must exceed 0.5, got {self.tau}")
        self.dims = tuple(int(n) for n in self.dims)
        self.face_velocity = (
            np.zeros((6, 3)) if self.face_velocity is None else np.asarray(self.face_velocity, float).reshape(6, 3)
        )
        self.acceleration = np.zeros(3) if self.acceleration is None else np.asarray(self.acceleration, float)
        self.kind = np.zeros(self.dims, dtype=np.int8)
        self.rho = np.ones(self.dims)
        self.u = np.zeros((3,) + self.dims)
        if self.G is None:
            self.G = equilibrium(self.rho, self.u)
        else:
            self.update_macros()
        self.Gpost = self.G.copy()
        self._Gnew = np.empty_like(self.G)
        self.time_step = 0

    # unit conversion -------------------------------------------------
    @property
    def velocity_scale(self):
        return self.dx / self.dt

    @property
    def viscosity(self):
        """Kinematic viscosity in SI units."""
        return CS2 * (self.tau - 0.5) * self.dx**2 / self.dt

    @property
    def force_scale(self):
        """SI force corresponding to one lattice force unit."""
        return self.rho_ref * self.dx**4 / self.dt**2

    @property
    def periodic(self):
        return np.array([b == "periodic" for b in self.boundary])

    def acceleration_lattice(self):
        return self.acceleration * self.dt**2 / self.dx

    def node_positions(self, axis):
        return (np.arange(self.dims[axis]) + 0.5) * self.dx

    def velocity_si(self):
        return self.u * self.velocity_scale

    def set_equilibrium(self, rho, u_si):
        self.rho = np.broadcast_to(np.asarray(rho, float), self.dims).copy()
        u_lat = np.asarray(u_si, float) / self.velocity_scale
        if u_lat.shape == (3,):
            u_lat = u_lat.reshape(3, 1, 1, 1)
        self.u = np.broadcast_to(u_lat, (3,) + self.dims).copy()
        a = self.acceleration_lattice().reshape(3, 1, 1, 1)
        self.G = equilibrium(self.rho, self.u - 0.5 * a)

    # stepping ---------------------------------------------------------
    def collide(self):
        ax, ay, az = self.acceleration_lattice()
        _collide(self.G, self.Gpost, self.kind, self.rho, self.u, self.tau, ax, ay, az)

    def stream(self):
        fu = self.face_velocity / self.velocity_scale
        _stream(self.Gpost, self._Gnew, self.periodic, fu)
        self.G, self._Gnew = self._Gnew, self.G

    def update_macros(self):
        ax, ay, az = self.acceleration_lattice() if hasattr(self, "kind") else (0.0, 0.0, 0.0)
        bad = _macros(self.G, self.kind, self.rho, self.u, ax, ay, az)
        self._check(bad)

    def _check(self, bad):
        if bad >= 0:
            nx, ny, nz = self.dims
            cell = (bad // (ny * nz), (bad // nz) % ny, bad % nz)
            raise LatticeError(f"non-positive or NaN density at cell {cell}, step {self.time_step}")

    def collide_stream(self, post_stream=None):
        """Advance one lattice step.

        ``post_stream`` is called with the field after streaming and before
        the macroscopic update; the coupling layer uses it to patch
        particle boundary links.
        """
        self.collide()
        self.stream()
        if post_stream is not None:
            post_stream(self)
        self.update_macros()
        self.time_step += 1
        return self

    # diagnostics --------------------------------------------------------
    def total_mass(self):
        """Sum of density over non-solid nodes (lattice units)."""
        return float(self.rho[self.kind != SOLID].sum())

    def kinetic_energy(self):
        fluid = self.kind != SOLID
        return float(0.5 * np.sum(self.rho[fluid] * np.sum(self.u[:, fluid] ** 2, axis=0)))

    def max_speed(self):
        fluid = self.kind != SOLID
        return float(np.sqrt(np.max(np.sum(self.u[:, fluid] ** 2, axis=0)))) if fluid.any() else 0.0
