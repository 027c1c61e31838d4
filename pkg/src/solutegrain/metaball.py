"""Metaball implicit surfaces.

A particle is the region ``f(x) > c`` of

    f(x) = sum_i k_i / |x - x_i|^2

with control points ``x_i`` and positive weights ``k_i`` stored in the body
frame.  ``f`` grows towards the control points, so the gradient points into
the particle and the outward normal is ``-grad f / |grad f|``.

For sphero-Metaballs the stored weights describe the shrunken *internal*
Metaball (its ``f = 1`` surface is used by contact detection) and
``iso_value`` is the level that reproduces the outer, dilated surface seen by
the fluid and the solute.

All functions accept a single point of shape (3,) or a batch (N, 3).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

EPS_SINGULAR = 1e-12
SATURATED = 1e30
INTERSECT_TOL = 1e-3
INTERSECT_MAX_ITER = 200
PUSH_MAX_STEPS = 500
DEGENERATE_GRAD = 1e-12


class GeometryError(RuntimeError):
    """Base class for failed geometric queries."""


class IntersectionError(GeometryError):
    """Bisection did not find the isosurface between two trajectory endpoints."""

    def __init__(self, x_p, x_f, msg="no suitable intersection point found"):
        self.x_p = np.asarray(x_p, float)
        self.x_f = np.asarray(x_f, float)
        super().__init__(f"{msg}: x_p={self.x_p.tolist()} x_f={self.x_f.tolist()}")


class DegenerateNormalError(GeometryError):
    """The gradient vanishes, so no surface normal is defined."""


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z)


def quat_to_matrix(q):
    q = np.asarray(q, float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_mul(a, b):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    w1, x1, y1, z1 = np.moveaxis(a, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_from_rotvec(rv):
    """Quaternion for a rotation vector (axis * angle); batched over leading dims."""
    rv = np.asarray(rv, float)
    angle = np.linalg.norm(rv, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(a/2)/a -> 1/2 for small angles
    small = angle < 1e-8
    safe = np.where(small, 1.0, angle)
    s = np.where(small, 0.5 - angle**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), rv * s], axis=-1)


@dataclass
class Pose:
    """Rigid body-to-world transform ``x_world = R(q) x_body + translation``."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        self.translation = np.array(self.translation, dtype=float).reshape(3)
        q = np.array(self.orientation, dtype=float).reshape(4)
        self.orientation = q / np.linalg.norm(q)

    @property
    def rotation(self):
        key = self.orientation.tobytes()
        cached = self.__dict__.get("_rot")
        if cached is None or cached[0] != key:
            cached = (key, quat_to_matrix(self.orientation))
            self.__dict__["_rot"] = cached
        return cached[1]

    def to_body(self, x_world):
        return (np.asarray(x_world, float) - self.translation) @ self.rotation

    def to_world(self, x_body):
        return np.asarray(x_body, float) @ self.rotation.T + self.translation

    def rotate(self, v_body):
        return np.asarray(v_body, float) @ self.rotation.T

    def copy(self):
        return Pose(self.translation.copy(), self.orientation.copy())


IDENTITY = Pose()


# ---------------------------------------------------------------------------
# batched kernels (body frame)


@njit(cache=True)
def _f_point(px, py, pz, cps, weights):
    f = 0.0
    for i in range(cps.shape[0]):
        dx = px - cps[i, 0]
        dy = py - cps[i, 1]
        dz = pz - cps[i, 2]
        r2 = dx * dx + dy * dy + dz * dz
        if r2 < 1e-24:
            return 1e30
        f += weights[i] / r2
    return f


@njit(cache=True)
def _field(points, cps, weights):
    n = points.shape[0]
    out = np.empty(n)
    for p in range(n):
        f = 0.0
        for i in range(cps.shape[0]):
            dx = points[p, 0] - cps[i, 0]
            dy = points[p, 1] - cps[i, 1]
            dz = points[p, 2] - cps[i, 2]
            r2 = dx * dx + dy * dy + dz * dz
            if r2 < 1e-24:
                f = 1e30
                break
            f += weights[i] / r2
        out[p] = f
    return out


@njit(cache=True)
def _field_grad(points, cps, weights):
    n = points.shape[0]
    f = np.empty(n)
    g = np.zeros((n, 3))
    for p in range(n):
        acc = 0.0
        gx = 0.0
        gy = 0.0
        gz = 0.0
        near = -1
        for i in range(cps.shape[0]):
            dx = points[p, 0] - cps[i, 0]
            dy = points[p, 1] - cps[i, 1]
            dz = points[p, 2] - cps[i, 2]
            r2 = dx * dx + dy * dy + dz * dz
            if r2 < 1e-24:
                near = i
                break
            acc += weights[i] / r2
            c = -2.0 * weights[i] / (r2 * r2)
            gx += c * dx
            gy += c * dy
            gz += c * dz
        if near >= 0:
            f[p] = 1e30
            dx = cps[near, 0] - points[p, 0]
            dy = cps[near, 1] - points[p, 1]
            dz = cps[near, 2] - points[p, 2]
            r = math.sqrt(dx * dx + dy * dy + dz * dz)
            if r > 0.0:
                g[p, 0] = 1e30 * dx / r
                g[p, 1] = 1e30 * dy / r
                g[p, 2] = 1e30 * dz / r
        else:
            f[p] = acc
            g[p, 0] = gx
            g[p, 1] = gy
            g[p, 2] = gz
    return f, g


@njit(cache=True)
def _bisect(xp, xf, cps, weights, c, tol, max_iter):
    """Bisection on segments xp -> xf with f(xp) < c < f(xf).

    Returns (points, status) where status is 0 on success, 1 on failure.
    """
    n = xp.shape[0]
    out = np.empty((n, 3))
    status = np.ones(n, dtype=np.int64)
    for s in range(n):
        a0 = xp[s, 0]
        a1 = xp[s, 1]
        a2 = xp[s, 2]
        b0 = xf[s, 0]
        b1 = xf[s, 1]
        b2 = xf[s, 2]
        fa = _f_point(a0, a1, a2, cps, weights)
        fb = _f_point(b0, b1, b2, cps, weights)
        m0 = m1 = m2 = 0.0
        seg2 = (b0 - a0) ** 2 + (b1 - a1) ** 2 + (b2 - a2) ** 2
        for _ in range(max_iter):
            m0 = 0.5 * (a0 + b0)
            m1 = 0.5 * (a1 + b1)
            m2 = 0.5 * (a2 + b2)
            fm = _f_point(m0, m1, m2, cps, weights)
            # the f tolerance alone is loose where the gradient is shallow, so
            # the bracket is also narrowed to a small fraction of the segment
            br2 = (b0 - a0) ** 2 + (b1 - a1) ** 2 + (b2 - a2) ** 2
            if abs(fm - c) < tol and br2 < 1e-14 * seg2:
                status[s] = 0
                # one secant step inside the final bracket sharpens the point
                if fm > c:
                    lo0, lo1, lo2, flo, hi0, hi1, hi2, fhi = a0, a1, a2, fa, m0, m1, m2, fm
                else:
                    lo0, lo1, lo2, flo, hi0, hi1, hi2, fhi = m0, m1, m2, fm, b0, b1, b2, fb
                if fhi - flo > 0.0 and fhi < 1e29:
                    t = (c - flo) / (fhi - flo)
                    p0 = lo0 + t * (hi0 - lo0)
                    p1 = lo1 + t * (hi1 - lo1)
                    p2 = lo2 + t * (hi2 - lo2)
                    fp = _f_point(p0, p1, p2, cps, weights)
                    if abs(fp - c) < abs(fm - c):
                        m0 = p0
                        m1 = p1
                        m2 = p2
                break
            if fm < c:
                a0 = m0
                a1 = m1
                a2 = m2
                fa = fm
            else:
                b0 = m0
                b1 = m1
                b2 = m2
                fb = fm
        out[s, 0] = m0
        out[s, 1] = m1
        out[s, 2] = m2
    return out, status


@njit(cache=True)
def _link_fraction(x0, d, cps, weights, c, tol):
    """Fraction q in (0, 1] with f(x0 + q d) = c, for f(x0) < c < f(x0 + d).

    Safeguarded regula falsi (Illinois) on the scalar function of q.
    """
    n = x0.shape[0]
    q = np.empty(n)
    for s in range(n):
        lo = 0.0
        hi = 1.0
        flo = _f_point(x0[s, 0], x0[s, 1], x0[s, 2], cps, weights) - c
        fhi = _f_point(x0[s, 0] + d[s, 0], x0[s, 1] + d[s, 1], x0[s, 2] + d[s, 2], cps, weights) - c
        # nodes lying on the surface to rounding: the wall sits at that end
        if fhi <= 0.0:
            q[s] = 1.0
            continue
        if flo >= 0.0:
            q[s] = 1e-12
            continue
        side = 0
        m = 0.5
        for _ in range(100):
            if fhi > 1e3 * (abs(c) + 1.0) or fhi - flo <= 0.0:
                m = 0.5 * (lo + hi)
            else:
                m = (lo * fhi - hi * flo) / (fhi - flo)
            if not (m > lo and m < hi):
                m = 0.5 * (lo + hi)
            fm = _f_point(x0[s, 0] + m * d[s, 0], x0[s, 1] + m * d[s, 1], x0[s, 2] + m * d[s, 2], cps, weights) - c
            if abs(fm) < tol or hi - lo < 1e-12:
                break
            if fm < 0.0:
                lo = m
                flo = fm
                if side == -1:
                    fhi *= 0.5
                side = -1
            else:
                hi = m
                fhi = fm
                if side == 1:
                    flo *= 0.5
                side = 1
        q[s] = max(m, 1e-12)
    return q


# ---------------------------------------------------------------------------


@dataclass
class MetaballShape:
    """Control points and weights (body frame) plus sphero dilation radius.

    ``iso_value`` defaults to 1 for ``sphero_radius == 0``; otherwise it is
    calibrated so that ``f = iso_value`` reproduces the surface dilated by
    ``sphero_radius``.
    """

    control_points: np.ndarray
    weights: np.ndarray
    sphero_radius: float = 0.0
    iso_value: float | None = None

    def __post_init__(self):
        self.control_points = np.array(self.control_points, dtype=float).reshape(-1, 3)
        self.weights = np.array(self.weights, dtype=float).reshape(-1)
        if len(self.weights) == 0:
            raise ValueError("a Metaball needs at least one control point")
        if len(self.weights) != len(self.control_points):
            raise ValueError("control_points and weights differ in length")
        if np.any(self.weights <= 0):
            raise ValueError("Metaball weights must be strictly positive")
        if self.sphero_radius < 0:
            raise ValueError("sphero_radius must be non-negative")
        if self.iso_value is None:
            self.iso_value = 1.0 if self.sphero_radius == 0 else dilated_iso_value(self)
        self.iso_value = float(self.iso_value)
        self._bound = {}

    @property
    def n(self):
        return len(self.weights)

    @property
    def centroid(self):
        """Weight-averaged control-point centroid (body frame)."""
        return self.weights @ self.control_points / self.weights.sum()

    def field(self, x_body):
        x = np.asarray(x_body, float)
        return _field(np.ascontiguousarray(x.reshape(-1, 3)), self.control_points, self.weights).reshape(x.shape[:-1])

    def field_grad(self, x_body):
        x = np.asarray(x_body, float)
        f, g = _field_grad(np.ascontiguousarray(x.reshape(-1, 3)), self.control_points, self.weights)
        return f.reshape(x.shape[:-1]), g.reshape(x.shape)

    def bounding_radius(self, level=None):
        """Radius about :attr:`centroid` enclosing the ``f >= level`` region.

        Found by bisection along 200 directions and padded by 2 %; the analytic
        bound ``max|x_i - centroid| + sqrt(sum k / level)`` brackets each ray.
        """
        level = self.iso_value if level is None else float(level)
        if level not in self._bound:
            cen = self.centroid
            reach = np.linalg.norm(self.control_points - cen, axis=1).max()
            outer = reach + math.sqrt(self.weights.sum() / level)
            if self.field(cen) <= level:
                # widely separated lobes: keep the analytic bound
                self._bound[level] = outer
                return outer
            dirs = fibonacci_sphere(200)
            far = cen + outer * 1.001 * dirs
            inner = np.repeat(cen[None, :], len(dirs), 0)
            pts, _ = _bisect(far, inner, self.control_points, self.weights, level, 1e-9, 200)
            r = np.linalg.norm(pts - cen, axis=1).max()
            self._bound[level] = min(outer, 1.02 * r + 1e-12)
        return self._bound[level]

    def scaled(self, s):
        """Geometrically scaled copy (points by s, weights by s^2)."""
        return MetaballShape(self.control_points * s, self.weights * s * s, self.sphero_radius * s, self.iso_value)


def fibonacci_sphere(n):
    """``n`` nearly uniform unit vectors."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = math.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def dilated_iso_value(shape, n_dirs=256):
    """Level of the internal Metaball that matches its ``f = 1`` surface dilated by R_s.

    Points on the internal surface are moved outward along the normal by R_s;
    the field is sampled there and averaged.
    """
    tmp = MetaballShape(shape.control_points, shape.weights, 0.0, 1.0)
    cen = tmp.centroid
    dirs = fibonacci_sphere(n_dirs)
    R = tmp.bounding_radius(1.0) * 1.05
    far = cen + R * dirs
    near = np.repeat(cen[None, :], n_dirs, 0)
    if tmp.field(cen) <= 1.0:
        near = np.repeat(tmp.control_points[np.argmax(tmp.weights)][None, :] + 1e-9, n_dirs, 0)
    surf, status = _bisect(far, near, tmp.control_points, tmp.weights, 1.0, 1e-10, 200)
    surf = surf[status == 0]
    _, g = tmp.field_grad(surf)
    n_out = -g / np.linalg.norm(g, axis=1, keepdims=True)
    return float(np.mean(tmp.field(surf + shape.sphero_radius * n_out)))


def sphero_decompose(shape, R_s, n_dirs=256):
    """Split an outer Metaball into a zoomed internal Metaball plus dilation R_s.

    All weights are scaled by one factor ``alpha`` chosen so that the internal
    ``f = 1`` surface sits R_s inside the original surface (averaged over
    sampled surface points).  The returned shape has ``iso_value = alpha``,
    which reproduces the original surface exactly.
    """
    if R_s <= 0:
        return MetaballShape(shape.control_points, shape.weights, 0.0, 1.0)
    outer = MetaballShape(shape.control_points, shape.weights, 0.0, 1.0)
    cen = outer.centroid
    dirs = fibonacci_sphere(n_dirs)
    far = cen + outer.bounding_radius(1.0) * 1.05 * dirs
    near = np.repeat(cen[None, :], n_dirs, 0)
    if outer.field(cen) <= 1.0:
        near = np.repeat(outer.control_points[np.argmax(outer.weights)][None, :] + 1e-9, n_dirs, 0)
    surf, status = _bisect(far, near, outer.control_points, outer.weights, 1.0, 1e-10, 200)
    surf = surf[status == 0]
    _, g = outer.field_grad(surf)
    n_in = g / np.linalg.norm(g, axis=1, keepdims=True)
    alpha = 1.0 / float(np.mean(outer.field(surf + R_s * n_in)))
    return MetaballShape(shape.control_points, shape.weights * alpha, R_s, alpha)


def min_surface_distance(shape, n_dirs=256):
    """Smallest centroid-to-surface distance of the ``f = iso_value`` surface."""
    cen = shape.centroid
    dirs = fibonacci_sphere(n_dirs)
    far = cen + shape.bounding_radius() * 1.05 * dirs
    near = np.repeat(cen[None, :], n_dirs, 0)
    surf, status = _bisect(far, near, shape.control_points, shape.weights, shape.iso_value, 1e-10, 200)
    return float(np.linalg.norm(surf[status == 0] - cen, axis=1).min())


# ---------------------------------------------------------------------------
# public operations (world frame)


def evaluate(shape, x_world, pose=IDENTITY):
    """Metaball field value at world point(s)."""
    return shape.field(pose.to_body(x_world))


def gradient(shape, x_world, pose=IDENTITY):
    """World-frame gradient; points towards increasing ``f`` (into the particle)."""
    _, g = shape.field_grad(pose.to_body(x_world))
    return pose.rotate(g)


def evaluate_with_gradient(shape, x_world, pose=IDENTITY):
    f, g = shape.field_grad(pose.to_body(x_world))
    return f, pose.rotate(g)


def is_inside(shape, x_world, pose=IDENTITY):
    return evaluate(shape, x_world, pose) > shape.iso_value


def intersect_trajectories(shape, pose, x_p, x_f, tol=INTERSECT_TOL, max_iter=INTERSECT_MAX_ITER, level=None):
    """Batched bisection; returns ``(points, ok)``.

    The straddle is kept regardless of which end is inside, so ``x_p`` must be
    exterior and ``x_f`` interior only in the sense that ``f`` crosses the
    level between them.
    """
    c = shape.iso_value if level is None else level
    xp = np.ascontiguousarray(pose.to_body(np.atleast_2d(x_p)))
    xf = np.ascontiguousarray(pose.to_body(np.atleast_2d(x_f)))
    pts, status = _bisect(xp, xf, shape.control_points, shape.weights, c, tol, max_iter)
    return pose.to_world(pts), status == 0


def intersect_trajectory(shape, pose, x_p, x_f, tol=INTERSECT_TOL, max_iter=INTERSECT_MAX_ITER):
    """Point on segment ``[x_p, x_f]`` where the trajectory crosses the surface.

    ``x_p`` must be exterior (``f < c``) and ``x_f`` interior (``f > c``).
    Raises :class:`IntersectionError` after ``max_iter`` halvings.
    """
    x_p = np.asarray(x_p, float)
    x_f = np.asarray(x_f, float)
    c = shape.iso_value
    fp, ff = evaluate(shape, np.stack([x_p, x_f]), pose)
    if not (fp < c < ff):
        raise IntersectionError(x_p, x_f, "endpoints do not straddle the surface")
    pts, ok = intersect_trajectories(shape, pose, x_p, x_f, tol, max_iter)
    if not ok[0]:
        raise IntersectionError(x_p, x_f)
    return pts[0]


def reflect_vectors(t_i, normals):
    """Mirror ``t_i`` across planes with (not necessarily unit) ``normals``."""
    t_i = np.asarray(t_i, float)
    n = np.asarray(normals, float)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    if np.any(norm < DEGENERATE_GRAD):
        raise DegenerateNormalError("zero surface normal")
    n = n / norm
    return t_i - 2.0 * np.sum(t_i * n, axis=-1, keepdims=True) * n


def reflect_trajectory(shape, pose, x_p, x_f, x_inter):
    """Specular reflection of the part of a trajectory that entered the particle.

    Returns ``(x_f_reflected, t_r)`` where ``t_r`` mirrors
    ``t_i = x_f - x_inter`` about the tangent plane at ``x_inter``.
    """
    x_f = np.asarray(x_f, float)
    x_inter = np.asarray(x_inter, float)
    t_i = x_f - x_inter
    g = gradient(shape, x_inter, pose)
    if np.linalg.norm(g) < DEGENERATE_GRAD:
        raise DegenerateNormalError(f"vanishing gradient at {x_inter.tolist()}")
    t_r = reflect_vectors(t_i, g)
    return x_inter + t_r, t_r


def push_to_surface_batch(shape, pose, x_inside, tol=INTERSECT_TOL, max_steps=PUSH_MAX_STEPS):
    """Batched version of :func:`push_to_surface`; returns ``(points, ok)``."""
    x = np.array(pose.to_body(np.atleast_2d(x_inside)), dtype=float)
    c = shape.iso_value
    clamp = 0.5 * shape.bounding_radius()
    ok = np.zeros(len(x), dtype=bool)
    active = np.ones(len(x), dtype=bool)
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        f, g = shape.field_grad(x[idx])
        done = np.abs(f - c) < tol
        ok[idx[done]] = True
        active[idx[done]] = False
        idx, f, g = idx[~done], f[~done], g[~done]
        gn2 = np.sum(g * g, axis=1)
        dead = gn2 < DEGENERATE_GRAD**2
        active[idx[dead]] = False
        idx, f, g, gn2 = idx[~dead], f[~dead], g[~dead], gn2[~dead]
        # Newton step along the gradient line: f decreases along -grad f
        step = (f - c) / np.sqrt(gn2)
        step = np.clip(step, -clamp, clamp)
        x[idx] -= step[:, None] * g / np.sqrt(gn2)[:, None]
    return pose.to_world(x), ok


def push_to_surface(shape, pose, x_inside, tol=INTERSECT_TOL, max_steps=PUSH_MAX_STEPS):
    """Move an interior point out to the surface by descending ``f``."""
    x_inside = np.asarray(x_inside, float)
    f, g = evaluate_with_gradient(shape, x_inside, pose)
    if np.linalg.norm(g) < DEGENERATE_GRAD:
        raise DegenerateNormalError(f"vanishing gradient at {x_inside.tolist()}")
    pts, ok = push_to_surface_batch(shape, pose, x_inside, tol, max_steps)
    if not ok[0]:
        raise GeometryError(f"no surface reached from {x_inside.tolist()} within {max_steps} steps")
    return pts[0]


def link_fractions(shape, pose, x_fluid, direction, level=None, tol=INTERSECT_TOL):
    """Fractions ``q`` with ``f(x_fluid + q * direction) = level`` for cut links."""
    c = shape.iso_value if level is None else level
    x0 = np.ascontiguousarray(pose.to_body(np.atleast_2d(x_fluid)))
    d = np.ascontiguousarray(np.atleast_2d(direction) @ pose.rotation)
    return _link_fraction(x0, d, shape.control_points, shape.weights, c, tol)


# ---------------------------------------------------------------------------
# particle definition files


def parse_particle_file(text):
    """Parse particle definitions.

    Grammar (``#`` starts a comment, blank lines are ignored)::

        file    := record*
        record  := sphere | general
        sphere  := "sphere" RADIUS [R_S]
        general := N  line{N}  [R_S]
        line    := X Y Z K

    A lone number following the ``N`` control-point lines is the dilation
    radius R_s.  Without it R_s defaults to 0.1 times the smallest
    centroid-to-surface distance.  The listed weights describe the outer
    particle surface ``f = 1``; the returned shapes are sphero-decomposed.
    """
    lines = []
    for raw in text.splitlines():
        s = raw.split("#", 1)[0].strip()
        if s:
            lines.append(s.split())
    shapes = []
    i = 0
    while i < len(lines):
        tok = lines[i]
        if tok[0].lower() == "sphere":
            r = float(tok[1])
            cps, ws = np.zeros((1, 3)), np.array([r * r])
            rs = float(tok[2]) if len(tok) > 2 else None
            i += 1
        else:
            if len(tok) != 1:
                raise ValueError(f"line {i + 1}: expected control-point count, got {' '.join(tok)}")
            n = int(tok[0])
            rows = lines[i + 1:i + 1 + n]
            if len(rows) != n or any(len(r) != 4 for r in rows):
                raise ValueError(f"record at line {i + 1}: expected {n} lines of 'x y z k'")
            arr = np.array(rows, dtype=float)
            cps, ws = arr[:, :3], arr[:, 3]
            i += 1 + n
            rs = None
            if i < len(lines) and len(lines[i]) == 1 and lines[i][0].lower() != "sphere":
                # a single number is R_s unless it is the next record's count followed by its rows
                nxt = lines[i + 1] if i + 1 < len(lines) else None
                if nxt is None or len(nxt) != 4 or not lines[i][0].isdigit():
                    rs = float(lines[i][0])
                    i += 1
        outer = MetaballShape(cps, ws, 0.0, 1.0)
        if rs is None:
            rs = 0.1 * min_surface_distance(outer)
        shapes.append(sphero_decompose(outer, rs))
    return shapes


def load_particle_file(path):
    with open(path) as fh:
        return parse_particle_file(fh.read())


def format_particle_file(shapes):
    """Inverse of :func:`parse_particle_file` for outer-surface shapes."""
    out = []
    for s in shapes:
        w = s.weights / s.iso_value  # back to the outer surface f = 1
        out.append(str(s.n))
        out += [f"{p[0]:.12g} {p[1]:.12g} {p[2]:.12g} {k:.12g}" for p, k in zip(s.control_points, w)]
        out.append(f"{s.sphero_radius:.12g}")
    return "\n".join(out) + "\n"
