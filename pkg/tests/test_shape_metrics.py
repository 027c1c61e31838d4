import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from solutegrain import shape_metrics as sm
from solutegrain.metaball import MetaballShape
from solutegrain.shape_metrics import ImplicitSurface, ShapeError


def sphere(r):
    return MetaballShape([(0, 0, 0)], [r * r])


def test_unit_sphere_mesh():
    mesh = sm.mesh_surface(sphere(1.0), resolution=1 / 32)
    assert mesh.area == pytest.approx(4 * math.pi, rel=0.01)
    assert mesh.volume == pytest.approx(4 * math.pi / 3, rel=0.01)
    assert mesh.n_components == 1


def test_disjoint_lobes_are_flagged():
    shape = MetaballShape([(-3, 0, 0), (3, 0, 0)], [1.0, 1.0])
    assert sm.mesh_surface(shape).n_components == 2
    with pytest.raises(ShapeError):
        sm.mesh_surface(shape, allow_multiple=False)


def test_mesh_errors():
    with pytest.raises(ShapeError):
        sm.mesh_surface(sphere(1.0), resolution=0.5)
    with pytest.raises(ShapeError):
        sm.mesh_surface(sphere(1.0), resolution=-1.0)


def test_silhouette_of_sphere():
    a, p = sm.silhouette(sphere(2.0), (0.3, 0.1, 1.0), 0.02)
    assert a == pytest.approx(4 * math.pi, rel=5e-3)
    assert p == pytest.approx(4 * math.pi, rel=5e-3)


@pytest.fixture(scope="module")
def sphere5():
    return sm.compute_features(sphere(5.0), resolution=0.1, n_orientations=64)


@pytest.mark.parametrize("name,value", [
    ("sphericity", 1.0), ("circularity", 1.0), ("diameter_ratio", 1.0), ("corey_shape_factor", 1.0),
    ("max_projected_area", 78.54),
])
def test_sphere_row(sphere5, name, value):
    assert getattr(sphere5, name) == pytest.approx(value, rel=0.02)


def test_prolate_two_ball_axis():
    shape = MetaballShape([(-1.5, 0, 0), (1.5, 0, 0)], [1.0, 1.0])
    feat = sm.compute_features(shape, n_orientations=64)
    assert feat.corey_shape_factor < 1
    mesh = sm.mesh_surface(shape)
    ext, axes = sm.principal_axes(mesh.vertices)
    assert abs(axes[:, 2] @ [1, 0, 0]) == pytest.approx(1.0, abs=1e-6)
    assert ext[2] == pytest.approx(feat.L_l)


def test_ellipsoid_against_closed_forms():
    a, b, c = 10.0, 5.0, 5.0

    def field(x):
        x = np.atleast_2d(x)
        q = (x[:, 0] / a) ** 2 + (x[:, 1] / b) ** 2 + (x[:, 2] / c) ** 2
        return 1.0 / np.maximum(q, 1e-300)

    feat = sm.compute_features(ImplicitSurface(field, 1.0, np.zeros(3), a), resolution=0.4, n_orientations=128)
    e = math.sqrt(1 - (c / a) ** 2)
    area = 2 * math.pi * c * c * (1 + a / (c * e) * math.asin(e))
    A_m = math.pi * a * c
    D_ns = 2 * (a * b * c) ** (1 / 3) / math.sqrt(4 * A_m / math.pi)
    assert feat.max_projected_area == pytest.approx(A_m, rel=0.02)
    assert feat.diameter_ratio == pytest.approx(D_ns, rel=0.02)
    assert feat.volume == pytest.approx(4 / 3 * math.pi * a * b * c, rel=0.01)
    assert feat.surface_area == pytest.approx(area, rel=0.01)
    assert feat.corey_shape_factor == pytest.approx(c / math.sqrt(b * a), rel=0.02)


def test_features_rotation_invariant():
    pts = np.array([(0, 0, 0), (1.2, 0.4, 0), (0.3, 1.0, 0.6)])
    k = np.array([0.8, 0.6, 0.5])
    base = sm.compute_features(MetaballShape(pts, k), n_orientations=128).as_dict()
    R = Rotation.from_rotvec([0.7, -1.1, 0.4]).as_matrix()
    turned = sm.compute_features(MetaballShape(pts @ R.T, k), n_orientations=128).as_dict()
    for name in sm.ShapeFeatures.COLUMNS:
        assert turned[name] == pytest.approx(base[name], rel=0.02), name


def test_feature_columns_match_dataclass():
    f = sm.ShapeFeatures(*([1.0] * 11))
    assert set(sm.ShapeFeatures.COLUMNS) <= set(f.as_dict())
