"""Shape descriptors of implicit particle surfaces.

Volume and surface area come from a marching-cubes mesh; projected area and
perimeter from silhouettes along sampled viewing directions, where a pixel
is covered when the field maximum along its viewing ray reaches the surface
level; axis lengths from a principal-axes bounding box of the mesh vertices.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from skimage import measure

from .metaball import MetaballShape, fibonacci_sphere


class ShapeError(ValueError):
    pass


@dataclass
class ImplicitSurface:
    """Level set ``field(x) = level`` with interior ``field > level``.

    ``center``/``radius`` bound the interior.  ``ray_max`` optionally gives
    the exact field maximum along rays ``p + t d``; otherwise it is found by
    sampling.
    """

    field: object
    level: float
    center: np.ndarray
    radius: float
    ray_max: object = None


def surface_from_shape(shape: MetaballShape) -> ImplicitSurface:
    cps = shape.control_points
    k = shape.weights

    def ray_max(p, d):
        return _metaball_ray_max(np.ascontiguousarray(p), d, cps, k)

    return ImplicitSurface(shape.field, shape.iso_value, shape.centroid, shape.bounding_radius(), ray_max)


def _as_surface(obj):
    return surface_from_shape(obj) if isinstance(obj, MetaballShape) else obj


@njit(cache=True)
def _metaball_ray_max(p, d, cps, k):
    """max over t of sum_i k_i / |p + t d - x_i|^2 for each row of ``p``."""
    n = p.shape[0]
    m = cps.shape[0]
    out = np.empty(n)
    for s in range(n):
        # perpendicular offsets and ray parameters of the control points
        best = 0.0
        tbest = 0.0
        for j in range(m):
            t = (cps[j, 0] - p[s, 0]) * d[0] + (cps[j, 1] - p[s, 1]) * d[1] + (cps[j, 2] - p[s, 2]) * d[2]
            f = 0.0
            for i in range(m):
                a0 = p[s, 0] + t * d[0] - cps[i, 0]
                a1 = p[s, 1] + t * d[1] - cps[i, 1]
                a2 = p[s, 2] + t * d[2] - cps[i, 2]
                r2 = a0 * a0 + a1 * a1 + a2 * a2
                f += k[i] / max(r2, 1e-24)
            if f > best:
                best = f
                tbest = t
        # Newton on df/dt = 0 from the best candidate
        t = tbest
        for _ in range(20):
            g1 = 0.0
            g2 = 0.0
            f = 0.0
            for i in range(m):
                a0 = p[s, 0] + t * d[0] - cps[i, 0]
                a1 = p[s, 1] + t * d[1] - cps[i, 1]
                a2 = p[s, 2] + t * d[2] - cps[i, 2]
                r2 = max(a0 * a0 + a1 * a1 + a2 * a2, 1e-24)
                ad = a0 * d[0] + a1 * d[1] + a2 * d[2]
                f += k[i] / r2
                g1 += -2.0 * k[i] * ad / (r2 * r2)
                g2 += -2.0 * k[i] / (r2 * r2) + 8.0 * k[i] * ad * ad / (r2 * r2 * r2)
            if f > best:
                best = f
            if g2 >= 0.0:
                break
            step = -g1 / g2
            t += step
            if abs(step) < 1e-12:
                break
        out[s] = best
    return out


def _sampled_ray_max(surf, p, d, n=96):
    t = np.linspace(-surf.radius, surf.radius, n)
    c = (surf.center - p) @ d
    pts = p[:, None, :] + (c[:, None] + t[None, :])[..., None] * d
    vals = surf.field(pts.reshape(-1, 3)).reshape(len(p), n)
    j = np.argmax(vals, axis=1)
    best = vals[np.arange(len(p)), j]
    # golden-section refinement around the best sample
    h = t[1] - t[0]
    lo = c + t[j] - h
    hi = c + t[j] + h
    g = (math.sqrt(5) - 1) / 2
    for _ in range(30):
        a = hi - g * (hi - lo)
        b = lo + g * (hi - lo)
        fa = surf.field(p + a[:, None] * d)
        fb = surf.field(p + b[:, None] * d)
        left = fa > fb
        hi = np.where(left, b, hi)
        lo = np.where(left, lo, a)
        best = np.maximum(best, np.maximum(fa, fb))
    return best


# ---------------------------------------------------------------------------
# meshing


@dataclass
class SurfaceMesh:
    vertices: np.ndarray
    faces: np.ndarray
    n_components: int

    @property
    def area(self):
        v = self.vertices[self.faces]
        return float(0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1).sum())

    @property
    def volume(self):
        v = self.vertices[self.faces]
        return float(abs(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum()) / 6.0)


def mesh_surface(shape, resolution=None, allow_multiple=True):
    """Marching-cubes triangulation of the surface of ``shape``.

    ``resolution`` is the grid spacing (default: bounding-box diagonal / 128).
    Disjoint surfaces are reported through ``n_components``; with
    ``allow_multiple=False`` they raise :class:`ShapeError`.
    """
    surf = _as_surface(shape)
    R = surf.radius * 1.05
    h = resolution if resolution is not None else (2 * math.sqrt(3) * R) / 128
    if h <= 0:
        raise ShapeError("resolution must be positive")
    n = int(math.ceil(2 * R / h)) + 3
    if n**3 < 1000:
        raise ShapeError("resolution too coarse: fewer than 10^3 grid cells across the particle")
    origin = surf.center - 0.5 * (n - 1) * h
    ax = np.arange(n) * h
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1) + origin
    vol = surf.field(pts).reshape(n, n, n)
    vol = np.minimum(vol, 1e6 * abs(surf.level) + 1e6)
    if not (vol.max() > surf.level > vol.min()):
        raise ShapeError("iso-value is never crossed on the sampling grid")
    verts, faces, _, _ = measure.marching_cubes(vol, level=surf.level, spacing=(h, h, h))
    verts = verts + origin
    nv = len(verts)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(nv, nv))
    ncomp, _ = connected_components(adj, directed=False)
    if ncomp > 1 and not allow_multiple:
        raise ShapeError(f"surface has {ncomp} disconnected components")
    return SurfaceMesh(verts, faces, int(ncomp))


# ---------------------------------------------------------------------------
# silhouettes


def _basis(d):
    a = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(d, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    return e1, e2


def _polygon_area(c):
    x, y = c[:, 0], c[:, 1]
    return 0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def silhouette(shape, direction, resolution):
    """Projected area and perimeter of ``shape`` viewed along ``direction``."""
    surf = _as_surface(shape)
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    e1, e2 = _basis(d)
    R = surf.radius * 1.05
    n = int(math.ceil(2 * R / resolution)) + 1
    s = (np.arange(n) - 0.5 * (n - 1)) * resolution
    A, B = np.meshgrid(s, s, indexing="ij")
    p = surf.center + A.reshape(-1, 1) * e1 + B.reshape(-1, 1) * e2
    if surf.ray_max is not None:
        img = surf.ray_max(p, d)
    else:
        img = _sampled_ray_max(surf, p, d)
    img = np.minimum(img.reshape(n, n), 1e6 * abs(surf.level) + 1e6)
    img = np.pad(img, 1, constant_values=min(img.min(), surf.level) - 1.0)
    contours = measure.find_contours(img, surf.level)
    area = 0.0
    perim = 0.0
    for c in contours:
        if not np.allclose(c[0], c[-1]):
            continue
        area += _polygon_area(c)
        perim += float(np.sum(np.linalg.norm(np.diff(c, axis=0), axis=1)))
    # find_contours orients outer boundaries consistently; holes come out with the opposite sign
    return abs(area) * resolution**2, perim * resolution


# ---------------------------------------------------------------------------
# features


@dataclass
class ShapeFeatures:
    sphericity: float
    circularity: float
    diameter_ratio: float
    corey_shape_factor: float
    max_projected_area: float
    volume: float
    surface_area: float
    projected_perimeter: float
    L_s: float
    L_i: float
    L_l: float
    n_components: int = 1

    COLUMNS = (
        "sphericity", "circularity", "diameter_ratio", "corey_shape_factor", "max_projected_area",
        "volume", "surface_area", "projected_perimeter", "L_s", "L_i", "L_l",
    )

    def as_dict(self):
        return asdict(self)


def principal_axes(vertices):
    """Sorted extents of ``vertices`` along the eigenvectors of their covariance, and the axes."""
    c = vertices - vertices.mean(axis=0)
    w, V = np.linalg.eigh(np.cov(c.T))
    proj = c @ V
    ext = proj.max(axis=0) - proj.min(axis=0)
    order = np.argsort(ext)
    return ext[order], V[:, order]


def compute_features(shape, resolution=None, n_orientations=256):
    surf = _as_surface(shape)
    mesh = mesh_surface(surf, resolution)
    h = resolution if resolution is not None else (2 * math.sqrt(3) * surf.radius * 1.05) / 128
    V = mesh.volume
    A = mesh.area
    D_n = (6 * V / math.pi) ** (1 / 3)
    best = (-1.0, 0.0)
    for d in fibonacci_sphere(n_orientations):
        a, p = silhouette(surf, d, h)
        if a > best[0]:
            best = (a, p)
    A_m, P_p = best
    D_s = math.sqrt(4 * A_m / math.pi)
    (L_s, L_i, L_l), _ = principal_axes(mesh.vertices)
    A_ve = math.pi ** (1 / 3) * (6 * V) ** (2 / 3)
    return ShapeFeatures(
        sphericity=float(A_ve / A),
        circularity=float(math.pi * D_s / P_p),
        diameter_ratio=float(D_n / D_s),
        corey_shape_factor=float(L_s / math.sqrt(L_i * L_l)),
        max_projected_area=float(A_m),
        volume=V,
        surface_area=A,
        projected_perimeter=float(P_p),
        L_s=float(L_s),
        L_i=float(L_i),
        L_l=float(L_l),
        n_components=mesh.n_components,
    )
