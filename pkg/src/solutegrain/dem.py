"""Discrete-element dynamics of Metaball particles.

Contacts are resolved on the sphero-Metaball decomposition: the internal
Metaball surface ``f = 1`` dilated by ``R_s``.  Metaball pairs are handled by
Newton-Raphson on the stationarity condition of ``f_a + f_b``; Metaball-wall
contacts by Newton-Raphson on the lowest-point condition for the rotated
particle.  Forces follow a linear spring-dashpot law with Coulomb-capped
tangential springs.

Particle state lives in :class:`ParticleSystem` as arrays so that a DEM
sub-step costs a handful of numpy calls; :class:`RigidParticle` is the
per-particle record the contact routines consume.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .metaball import MetaballShape, Pose, quat_from_rotvec, quat_mul, quat_to_matrix

log = logging.getLogger(__name__)


class ContactError(RuntimeError):
    pass


@dataclass
class ContactMaterial:
    k_n: float = 1e4
    k_t: float = 5e3
    eta_n: float = 0.0
    eta_t: float = 0.0
    mu_s: float = 0.5

    def __post_init__(self):
        for name in ("k_n", "k_t", "eta_n", "eta_t", "mu_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class ContactResolution:
    """Contact point, unit normal (pointing from body b towards body a), overlap."""

    contact_point: np.ndarray
    normal: np.ndarray
    overlap: float
    closest_a: np.ndarray | None = None
    closest_b: np.ndarray | None = None
    stationary_point: np.ndarray | None = None


@dataclass
class Wall:
    """Infinite plane; ``normal`` points into the domain."""

    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        self.point = np.asarray(self.point, float)
        n = np.asarray(self.normal, float)
        self.normal = n / np.linalg.norm(n)


@dataclass
class RigidParticle:
    shape: MetaballShape
    pose: Pose = field(default_factory=Pose)
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    mass: float = 1.0
    inertia: np.ndarray = field(default_factory=lambda: np.eye(3))
    force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    torque: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pid: int = 0

    def __post_init__(self):
        self.velocity = np.asarray(self.velocity, float)
        self.angular_velocity = np.asarray(self.angular_velocity, float)
        self.inertia = np.asarray(self.inertia, float)
        if self.mass <= 0:
            raise ValueError("particle mass must be positive")
        if not np.allclose(self.inertia, self.inertia.T) or np.any(np.linalg.eigvalsh(self.inertia) <= 0):
            raise ValueError("inertia tensor must be symmetric positive definite")

    def surface_velocity(self, x):
        return self.velocity + np.cross(self.angular_velocity, np.asarray(x, float) - self.pose.translation)


# ---------------------------------------------------------------------------
# mass properties


def mass_properties(shape, density, resolution=None):
    """Volume, centre of mass (body frame) and inertia tensor about it.

    Single-control-point shapes are spheres and use closed forms; others are
    integrated on a voxel grid of the outer surface (``f > iso_value``).
    """
    if shape.n == 1:
        r = math.sqrt(shape.weights[0] / shape.iso_value)
        V = 4.0 / 3.0 * math.pi * r**3
        m = density * V
        return V, shape.control_points[0].copy(), 0.4 * m * r * r * np.eye(3)
    R = shape.bounding_radius()
    h = resolution or R / 40.0
    cen = shape.centroid
    ax = np.arange(-R, R + h, h)
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1) + cen
    inside = shape.field(pts) > shape.iso_value
    p = pts[inside]
    dV = h**3
    V = len(p) * dV
    com = p.mean(axis=0)
    d = p - com
    m = density * V
    r2 = np.sum(d * d, axis=1)
    I = density * dV * (np.eye(3) * r2.sum() - d.T @ d)
    return V, com, I


def recentred(shape, com):
    return MetaballShape(shape.control_points - com, shape.weights, shape.sphero_radius, shape.iso_value)


def make_particle(shape, density, position, orientation=(1.0, 0.0, 0.0, 0.0), velocity=(0, 0, 0), pid=0):
    """Rigid particle with its body origin moved to the centre of mass."""
    V, com, I = mass_properties(shape, density)
    return RigidParticle(
        recentred(shape, com), Pose(position, orientation), np.asarray(velocity, float), np.zeros(3),
        density * V, I, pid=pid,
    )


# ---------------------------------------------------------------------------
# Metaball fields in the world frame (level-1 internal surface)


@njit(cache=True)
def _derivs_kernel(cps, k, R, t, x):
    xb = (x - t) @ R
    f = 0.0
    g = np.zeros(3)
    H = np.zeros((3, 3))
    for i in range(cps.shape[0]):
        d = xb - cps[i]
        r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
        f += k[i] / r2
        a = -2.0 * k[i] / (r2 * r2)
        b = 8.0 * k[i] / (r2 * r2 * r2)
        for j in range(3):
            g[j] += a * d[j]
            H[j, j] += a
            for m in range(3):
                H[j, m] += b * d[j] * d[m]
    return f, R @ g, R @ H @ R.T


def _field_derivs(shape, pose, x):
    """f, world gradient and world Hessian of the internal Metaball at one point."""
    return _derivs_kernel(shape.control_points, shape.weights, pose.rotation, pose.translation,
                          np.asarray(x, dtype=np.float64))


def _project_along_gradient(shape, pose, x_m, tol=1e-12, max_iter=50):
    """Point ``x_m + q grad f(x_m)`` on the internal surface ``f = 1``.

    The first iterate is the first-order Taylor estimate
    ``q = (1 - f) / |grad f|^2``; further Newton steps along the same ray make
    the projection exact for spheres.
    """
    f, g, _ = _field_derivs(shape, pose, x_m)
    gg = g @ g
    q = (1.0 - f) / gg
    for _ in range(max_iter):
        fx, gx, _ = _field_derivs(shape, pose, x_m + q * g)
        if abs(fx - 1.0) < tol:
            break
        slope = gx @ g
        if slope == 0:
            break
        q += (1.0 - fx) / slope
    return x_m + q * g


def _centroid_world(shape, pose):
    return pose.to_world(shape.centroid)


def find_contact_metaball(pa, pb, c_tol=1e-2, max_iter=100, tol=1e-10):
    """Sphero-Metaball contact between two particles, or ``None``.

    Newton-Raphson locates the stationary point ``x_m`` of ``f_a + f_b``,
    seeded at the midpoint of the two weighted control-point centroids with
    fall-back seeds at 1/4 and 3/4.  The stationary point must satisfy
    ``c_tol < f_a, f_b < 1``; otherwise the contact is skipped and logged.
    """
    ca = _centroid_world(pa.shape, pa.pose)
    cb = _centroid_world(pb.shape, pb.pose)
    span = np.linalg.norm(cb - ca)
    x_m = None
    inner = None
    for frac in (0.5, 0.25, 0.75):
        x = ca + frac * (cb - ca)
        ok = False
        for _ in range(max_iter):
            fa, ga, Ha = _field_derivs(pa.shape, pa.pose, x)
            fb, gb, Hb = _field_derivs(pb.shape, pb.pose, x)
            grad = ga + gb
            gnorm = np.linalg.norm(grad)
            if gnorm <= tol * (np.linalg.norm(ga) + np.linalg.norm(gb) + 1e-300):
                ok = True
                break
            try:
                step = -np.linalg.solve(Ha + Hb, grad)
            except np.linalg.LinAlgError:
                break
            slen = np.linalg.norm(step)
            if slen > 0.25 * span:
                step *= 0.25 * span / slen
            x = x + step
            if slen < 1e-14 * max(span, 1e-300):
                ok = True
                break
        if not ok:
            continue
        fa = pa.shape.field(pa.pose.to_body(x))
        fb = pb.shape.field(pb.pose.to_body(x))
        if c_tol < fa < 1.0 and c_tol < fb < 1.0:
            x_m = x
            break
        if c_tol < fa and c_tol < fb and inner is None:
            inner = x
        log.debug("stationary point violates c_tol < f < 1 (fa=%g fb=%g), seed %.2f", fa, fb, frac)
    if x_m is None and inner is not None:
        # Bodies of unequal size put the stationary point inside the larger
        # internal surface.  It still projects onto both surfaces; accept it
        # when neither projected point lies inside the other internal body.
        x_c0 = _project_along_gradient(pa.shape, pa.pose, inner)
        x_c1 = _project_along_gradient(pb.shape, pb.pose, inner)
        if pb.shape.field(pb.pose.to_body(x_c0)) < 1.0 and pa.shape.field(pa.pose.to_body(x_c1)) < 1.0:
            x_m = inner
    if x_m is None:
        log.info("Metaball contact %s-%s skipped: Newton-Raphson found no admissible stationary point", pa.pid, pb.pid)
        return None
    x_c0 = _project_along_gradient(pa.shape, pa.pose, x_m)
    x_c1 = _project_along_gradient(pb.shape, pb.pose, x_m)
    gap = x_c0 - x_c1
    dist = np.linalg.norm(gap)
    delta = pa.shape.sphero_radius + pb.shape.sphero_radius - dist
    if delta < 0:
        return None
    if dist > 1e-14:
        n = gap / dist
    else:
        _, ga, _ = _field_derivs(pa.shape, pa.pose, x_m)
        n = ga / np.linalg.norm(ga)
    # contact point at the middle of the overlap band, measured from x_c0 towards x_c1
    x_cp = x_c0 - (pa.shape.sphero_radius - 0.5 * delta) * n
    return ContactResolution(x_cp, n, float(delta), x_c0, x_c1, x_m)


def _lowest_point(shape, pose, normal, seed, max_iter=100, tol=1e-12):
    """Newton-Raphson for the point of ``f = 1`` whose gradient is parallel to ``normal``."""
    x = seed.copy()
    f, g, _ = _field_derivs(shape, pose, x)
    lam = 1.0 / max(np.linalg.norm(g), 1e-300)
    scale = shape.bounding_radius(1.0)
    for _ in range(max_iter):
        f, g, H = _field_derivs(shape, pose, x)
        r = np.concatenate([normal - lam * g, [f - 1.0]])
        if np.linalg.norm(r[:3]) < tol and abs(r[3]) < tol:
            return x, True
        J = np.zeros((4, 4))
        J[:3, :3] = -lam * H
        J[:3, 3] = -g
        J[3, :3] = g
        try:
            d = -np.linalg.solve(J, r)
        except np.linalg.LinAlgError:
            return x, False
        step = d[:3]
        sl = np.linalg.norm(step)
        if sl > 0.25 * scale:
            d *= 0.25 * scale / sl
        x = x + d[:3]
        lam = lam + d[3]
        # flat-bottomed shapes converge only linearly in the tangential
        # direction; the height is what matters for the overlap
        if abs(f - 1.0) < 1e-10 and abs(normal @ d[:3]) < 1e-12 * scale and np.linalg.norm(r[:3]) < 1e-3:
            return x, True
    f, g, _ = _field_derivs(shape, pose, x)
    good = abs(f - 1.0) < 1e-8 and np.linalg.norm(normal - lam * g) < 1e-8
    return x, good


def find_contact_wall(p, wall, tol=1e-12):
    """Sphero-Metaball contact with a plane wall, or ``None``.

    Each control point seeds a ray towards the wall; the ray's crossing of
    the internal surface starts a Newton-Raphson search for the point whose
    gradient is parallel to the wall normal.  The lowest converged candidate
    is the contact point ``x_cm``.
    """
    shape, pose = p.shape, p.pose
    nw = wall.normal
    cps = pose.to_world(shape.control_points)
    best = None
    R = pose.rotation
    L = shape.bounding_radius(1.0) * 2.5 + 1e-12
    for c in cps:
        # bisect the ray from the control point against the wall normal
        a, b = c - L * nw, c
        for _ in range(60):
            m = 0.5 * (a + b)
            d = (m - pose.translation) @ R - shape.control_points
            if np.sum(shape.weights / np.sum(d * d, axis=1)) > 1.0:
                b = m
            else:
                a = m
        x, good = _lowest_point(shape, pose, nw, 0.5 * (a + b), tol=tol)
        if not good:
            continue
        h = nw @ (x - wall.point)
        if best is None or h < best[1]:
            best = (x, h)
    if best is None:
        log.info("wall contact for particle %s skipped: Newton-Raphson did not converge", p.pid)
        return None
    x_cm, h = best
    delta = shape.sphero_radius - h
    if delta < 0:
        return None
    x_cw = x_cm - h * nw
    return ContactResolution(x_cw + 0.5 * delta * nw, nw.copy(), float(delta), x_cm, x_cw, x_cm)


# ---------------------------------------------------------------------------
# forces


def contact_force(c, pa, pb, mat, dt, spring=None):
    """Spring-dashpot force for contact ``c`` between ``pa`` and ``pb``.

    ``pb`` may be ``None`` for a fixed wall.  ``spring`` is the tangential
    spring carried over from the previous step (or ``None``).  Returns
    ``(F_a, F_b, T_a, T_b, spring)`` where ``F_b = -F_a``.
    """
    n = c.normal
    xcp = c.contact_point
    va = pa.surface_velocity(xcp)
    vb = pb.surface_velocity(xcp) if pb is not None else np.zeros(3)
    vrel = vb - va  # velocity of b as seen from a
    vn = vrel @ n
    Fn = max(mat.k_n * c.overlap + mat.eta_n * vn, 0.0)
    vt = vrel - vn * n
    xi = np.zeros(3) if spring is None else np.asarray(spring, float)
    # keep the spring in the current tangent plane
    mag = np.linalg.norm(xi)
    xi = xi - (xi @ n) * n
    m2 = np.linalg.norm(xi)
    if m2 > 0:
        xi *= mag / m2
    xi = xi + vt * dt
    trial = mat.k_t * xi + mat.eta_t * vt
    Ft0 = np.linalg.norm(trial)
    cap = mat.mu_s * Fn
    if Ft0 > cap:
        # sliding: cap the force and shrink the spring to the Coulomb limit
        Ft = trial * (cap / Ft0) if Ft0 > 0 else np.zeros(3)
        if mat.k_t > 0:
            xi = (Ft - mat.eta_t * vt) / mat.k_t
    else:
        Ft = trial
    Fa = Fn * n + Ft
    Ta = np.cross(xcp - pa.pose.translation, Fa)
    Tb = np.cross(xcp - pb.pose.translation, -Fa) if pb is not None else np.zeros(3)
    return Fa, -Fa, Ta, Tb, xi


# ---------------------------------------------------------------------------
# particle system


class ParticleSystem:
    """Array-backed state of a set of rigid Metaball particles.

    ``L`` is the world-frame angular momentum, the integrated quantity of the
    rotational equation; the angular velocity is derived from it with the
    current orientation.  Translational velocities are stored half a step
    ahead once stepping has started (leapfrog form of semi-implicit Euler),
    which makes free flight under constant acceleration exact.
    """

    def __init__(self, particles=()):
        particles = list(particles)
        self.shapes = [p.shape for p in particles]
        P = len(particles)
        self.x = np.array([p.pose.translation for p in particles], float).reshape(P, 3)
        self.q = np.array([p.pose.orientation for p in particles], float).reshape(P, 4)
        self.v = np.array([p.velocity for p in particles], float).reshape(P, 3)
        self.mass = np.array([p.mass for p in particles], float)
        self.inertia = np.array([p.inertia for p in particles], float).reshape(P, 3, 3)
        self.inv_inertia = np.linalg.inv(self.inertia) if P else np.zeros((0, 3, 3))
        self.pid = np.array([p.pid for p in particles], dtype=int)
        R = quat_to_matrix(self.q)
        w = np.array([p.angular_velocity for p in particles], float).reshape(P, 3)
        Iw = np.einsum("pij,pjk,plk,pl->pi", R, self.inertia, R, w) if P else np.zeros((0, 3))
        self.L = Iw
        self.started = False
        self.force = np.zeros((P, 3))
        self.torque = np.zeros((P, 3))
        self.radius = np.array([s.bounding_radius() for s in self.shapes])
        self.contact_radius = np.array([s.bounding_radius(1.0) + s.sphero_radius for s in self.shapes])

    def __len__(self):
        return len(self.mass)

    def rotations(self):
        return quat_to_matrix(self.q)

    def omega(self):
        R = self.rotations()
        body = np.matmul(R.transpose(0, 2, 1), self.L[:, :, None])
        return np.matmul(R, np.matmul(self.inv_inertia, body))[:, :, 0]

    def pose(self, i):
        return Pose(self.x[i], self.q[i])

    def particle(self, i, shift=None):
        """Snapshot of particle ``i`` (optionally translated by a periodic image shift)."""
        x = self.x[i] if shift is None else self.x[i] + shift
        return RigidParticle(
            self.shapes[i], Pose(x, self.q[i]), self.v[i].copy(), self.omega()[i], self.mass[i],
            self.inertia[i], pid=int(self.pid[i]),
        )

    def surface_velocity(self, i, pts):
        w = self.omega()[i]
        return self.v[i] + np.cross(w, np.asarray(pts) - self.x[i])

    def kinetic_energy(self):
        w = self.omega()
        return float(0.5 * np.sum(self.mass * np.sum(self.v**2, axis=1)) + 0.5 * np.sum(w * self.L))

    def momentum(self):
        return (self.mass[:, None] * self.v).sum(axis=0)

    def state(self):
        return {k: getattr(self, k).copy() for k in ("x", "q", "v", "L", "force", "torque")} | {
            "started": np.array(self.started)
        }

    def load_state(self, st):
        for k in ("x", "q", "v", "L", "force", "torque"):
            setattr(self, k, np.array(st[k], float))
        self.started = bool(st["started"])


def integrate(system, gravity=(0.0, 0.0, 0.0), dt=1.0, extra_acceleration=None, periodic_box=None):
    """Advance every particle by one step using ``system.force``/``torque``.

    Translation: ``v += (F/m + g) dt`` then ``x += v dt`` (the first call
    applies half a kick so that velocities live at half steps).  Rotation:
    ``L += T dt``, ``omega = R I^-1 R^T L``, quaternion advanced by the
    rotation ``omega dt`` and renormalised.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if len(system) == 0:
        return system
    acc = system.force / system.mass[:, None] + np.asarray(gravity, float)
    if extra_acceleration is not None:
        acc = acc + extra_acceleration
    if not np.all(np.isfinite(acc)) or not np.all(np.isfinite(system.torque)):
        bad = np.flatnonzero(~np.all(np.isfinite(acc), axis=1) | ~np.all(np.isfinite(system.torque), axis=1))
        raise FloatingPointError(f"non-finite force/torque on particles {system.pid[bad].tolist()}")
    kick = dt if system.started else 0.5 * dt
    system.v += acc * kick
    system.x += system.v * dt
    system.L += system.torque * dt
    system.started = True
    w = system.omega()
    dq = quat_from_rotvec(w * dt)
    q = quat_mul(dq, system.q)
    system.q = q / np.linalg.norm(q, axis=1, keepdims=True)
    if periodic_box is not None:
        lengths, periodic = periodic_box
        for a in range(3):
            if periodic[a]:
                system.x[:, a] %= lengths[a]
    return system


def broad_phase_pairs(system, periodic_box=None, skin=0.0):
    """Candidate pairs whose dilated bounding spheres (grown by ``skin``) overlap.

    Returns ``(i, j, shift)`` triples where ``shift`` is the periodic image
    translation to apply to particle ``j``.
    """
    P = len(system)
    if P < 2:
        return []
    d = system.x[None, :, :] - system.x[:, None, :]
    shift = np.zeros_like(d)
    if periodic_box is not None:
        lengths, periodic = periodic_box
        for a in range(3):
            if periodic[a]:
                s = -np.round(d[..., a] / lengths[a]) * lengths[a]
                shift[..., a] = s
                d[..., a] += s
    dist = np.linalg.norm(d, axis=2)
    reach = system.contact_radius[:, None] + system.contact_radius[None, :] + skin
    i, j = np.nonzero(np.triu(dist < reach, 1))
    return [(int(a), int(b), shift[a, b]) for a, b in zip(i, j)]


class ContactManager:
    """Accumulates contact forces and keeps tangential springs per contact pair."""

    def __init__(self, material, walls=(), periodic_box=None, c_tol=1e-2):
        self.material = material
        self.walls = list(walls)
        self.periodic_box = periodic_box
        self.c_tol = c_tol
        self.springs = {}
        self.n_contacts = 0
        # neighbour list with a skin, rebuilt once any particle has moved half the skin
        self._list = None

    def _pairs(self, system):
        skin = 0.25 * float(np.min(system.contact_radius))
        if self._list is not None:
            x_ref, pairs = self._list
            if len(x_ref) == len(system):
                d = system.x - x_ref
                if self.periodic_box is not None:
                    lengths, periodic = self.periodic_box
                    for a in range(3):
                        if periodic[a]:
                            d[:, a] -= lengths[a] * np.round(d[:, a] / lengths[a])
                if np.max(np.linalg.norm(d, axis=1)) < 0.5 * skin:
                    return self._filter(system, pairs)
        pairs = broad_phase_pairs(system, self.periodic_box, skin)
        self._list = (system.x.copy(), [(i, j) for i, j, _ in pairs])
        return self._filter(system, self._list[1])

    def _filter(self, system, pairs):
        out = []
        for i, j in pairs:
            d = system.x[j] - system.x[i]
            shift = np.zeros(3)
            if self.periodic_box is not None:
                lengths, periodic = self.periodic_box
                for a in range(3):
                    if periodic[a]:
                        shift[a] = -np.round(d[a] / lengths[a]) * lengths[a]
            if np.linalg.norm(d + shift) < system.contact_radius[i] + system.contact_radius[j]:
                out.append((i, j, shift))
        return out

    def accumulate(self, system, dt):
        """Add contact forces/torques into ``system.force``/``system.torque``."""
        active = set()
        self.n_contacts = 0
        if len(system) == 0:
            return
        snap_cache = {}

        def snap(i, shift=None):
            if shift is not None and np.any(shift):
                return system.particle(i, shift)
            if i not in snap_cache:
                snap_cache[i] = system.particle(i)
            return snap_cache[i]

        for i, j, shift in self._pairs(system):
            pa, pb = snap(i), snap(j, shift)
            c = find_contact_metaball(pa, pb, self.c_tol)
            if c is None:
                continue
            key = (int(system.pid[i]), int(system.pid[j]))
            Fa, Fb, Ta, Tb, xi = contact_force(c, pa, pb, self.material, dt, self.springs.get(key))
            self.springs[key] = xi
            active.add(key)
            system.force[i] += Fa
            system.force[j] += Fb
            system.torque[i] += Ta
            system.torque[j] += Tb
            self.n_contacts += 1
        for w, wall in enumerate(self.walls):
            h = (system.x - wall.point) @ wall.normal
            for i in np.flatnonzero(h < system.contact_radius):
                p = snap(int(i))
                c = find_contact_wall(p, wall)
                if c is None:
                    continue
                key = (int(system.pid[i]), -1 - w)
                Fa, _, Ta, _, xi = contact_force(c, p, None, self.material, dt, self.springs.get(key))
                self.springs[key] = xi
                active.add(key)
                system.force[i] += Fa
                system.torque[i] += Ta
                self.n_contacts += 1
        # springs reset once a contact is lost
        for key in list(self.springs):
            if key not in active:
                del self.springs[key]
