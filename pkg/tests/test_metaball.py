import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from solutegrain import metaball as mb
from solutegrain.metaball import (
    IDENTITY, DegenerateNormalError, GeometryError, IntersectionError, MetaballShape, Pose,
)


def ball(k=1.0, at=(0.0, 0.0, 0.0)):
    return MetaballShape([at], [k])


TWO = MetaballShape([(-1, 0, 0), (1, 0, 0)], [1.0, 1.0])


@pytest.mark.parametrize("shape,x,expected", [
    (ball(1.0), (1, 0, 0), 1.0),
    (ball(4.0), (2, 0, 0), 1.0),
    (TWO, (0, 0, 0), 2.0),
])
def test_evaluate_examples(shape, x, expected):
    assert mb.evaluate(shape, np.array(x, float)) == pytest.approx(expected, abs=1e-15)


def test_evaluate_saturates_at_control_point():
    assert mb.evaluate(ball(), np.zeros(3)) >= 1e30
    g = mb.gradient(TWO, np.array([1.0, 0.0, 0.0]))
    assert np.all(np.isfinite(g))


def test_gradient_examples():
    assert np.allclose(mb.gradient(ball(), np.array([1.0, 0, 0])), [-2, 0, 0], atol=1e-15)
    assert np.allclose(mb.gradient(TWO, np.zeros(3)), 0.0, atol=1e-15)


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(3)
    shape = MetaballShape(rng.normal(size=(3, 3)), rng.uniform(0.5, 2.0, 3))
    pose = Pose(rng.normal(size=3), rng.normal(size=4))
    pts = pose.to_world(rng.normal(size=(400, 3)) * 3)
    f = mb.evaluate(shape, pts, pose)
    pts = pts[(f > 0.1) & (f < 10)][:100]
    assert len(pts) >= 50
    g = mb.gradient(shape, pts, pose)
    h = 1e-6
    fd = np.stack([(mb.evaluate(shape, pts + h * e, pose) - mb.evaluate(shape, pts - h * e, pose)) / (2 * h)
                   for e in np.eye(3)], axis=1)
    rel = np.linalg.norm(g - fd, axis=1) / np.linalg.norm(g, axis=1)
    assert rel.max() < 1e-5


def test_single_point_isosurface_is_sphere():
    k = 2.7
    d = mb.fibonacci_sphere(1000)
    assert np.allclose(mb.evaluate(ball(k), math.sqrt(k) * d), 1.0, rtol=1e-12)


@pytest.mark.parametrize("shape,xp,xf,expected", [
    (ball(1.0), (2, 0, 0), (0.5, 0, 0), (1, 0, 0)),
    (ball(4.0, (1, 0, 0)), (4, 0, 0), (1.5, 0, 0), (3, 0, 0)),
])
def test_intersect_examples(shape, xp, xf, expected):
    x = mb.intersect_trajectory(shape, IDENTITY, xp, xf)
    assert np.allclose(x, expected, atol=1e-3)


def test_intersect_requires_straddle():
    with pytest.raises(IntersectionError):
        mb.intersect_trajectory(ball(), IDENTITY, (2, 0, 0), (3, 0, 0))


def test_intersect_random_segments_on_two_ball():
    rng = np.random.default_rng(0)
    shape = MetaballShape([(-0.6, 0, 0), (0.7, 0.2, 0)], [0.5, 0.8])
    done = 0
    while done < 50:
        xp = rng.uniform(-3, 3, 3)
        xf = rng.uniform(-1, 1, 3)
        fp, ff = mb.evaluate(shape, np.stack([xp, xf]))
        if not fp < 1 < ff:
            continue
        x = mb.intersect_trajectory(shape, IDENTITY, xp, xf)
        assert abs(mb.evaluate(shape, x) - 1) < 1e-3
        lo, hi = np.minimum(xp, xf), np.maximum(xp, xf)
        assert np.all(x >= lo - 1e-15) and np.all(x <= hi + 1e-15)
        done += 1


def test_reflect_examples():
    assert np.allclose(mb.reflect_vectors([1, 0, -1], [0, 0, 1]), [1, 0, 1])
    n = np.array([0.3, -0.4, 0.5])
    assert np.allclose(mb.reflect_vectors(-2.0 * n, n), 2.0 * n)
    xf, tr = mb.reflect_trajectory(ball(), IDENTITY, (1.2, 0, 0), (0.8, 0, 0), np.array([1.0, 0, 0]))
    assert np.allclose(tr, [0.2, 0, 0], atol=1e-15)
    assert np.allclose(xf, [1.2, 0, 0], atol=1e-15)


def test_reflect_degenerate_normal():
    with pytest.raises(DegenerateNormalError):
        mb.reflect_trajectory(TWO, IDENTITY, (0.1, 0, 0), (0, 0, 0), np.zeros(3))


vec = st.tuples(*[st.floats(-10, 10, allow_nan=False)] * 3)


@settings(max_examples=300, deadline=None)
@given(vec, vec)
def test_reflection_isometry_and_involution(t, n):
    t = np.array(t)
    n = np.array(n)
    if np.linalg.norm(n) < 1e-6:
        return
    r = mb.reflect_vectors(t, n)
    scale = max(np.linalg.norm(t), 1e-300)
    assert abs(np.linalg.norm(r) - np.linalg.norm(t)) <= 1e-10 * scale
    assert np.linalg.norm(mb.reflect_vectors(r, n) - t) <= 1e-10 * scale


def test_push_to_surface_examples():
    x = mb.push_to_surface(ball(), IDENTITY, (0.5, 0, 0))
    assert np.allclose(x, [1, 0, 0], atol=1e-3)
    with pytest.raises(DegenerateNormalError):
        mb.push_to_surface(TWO, IDENTITY, (0.0, 0, 0))


def test_push_random_interior_points_of_three_ball():
    shape = MetaballShape([(0, 0, 0), (1, 0.3, 0), (0.2, 1.1, 0.4)], [0.6, 0.5, 0.4])
    pose = Pose((0.5, -1, 2), (0.9, 0.1, -0.3, 0.2))
    rng = np.random.default_rng(5)
    pts = []
    while len(pts) < 100:
        x = pose.to_world(rng.uniform(-1, 2, 3))
        if mb.evaluate(shape, x, pose) > 1.05:
            pts.append(x)
    out, ok = mb.push_to_surface_batch(shape, pose, np.array(pts))
    assert ok.all()
    assert np.abs(mb.evaluate(shape, out, pose) - 1).max() < 1e-3


def test_push_reports_failure():
    with pytest.raises(GeometryError):
        mb.push_to_surface(ball(), IDENTITY, (0.5, 0, 0), max_steps=0)


def test_pose_roundtrip_and_unit_quaternion():
    p = Pose((1, 2, 3), (3.0, 1.0, -2.0, 0.5))
    assert abs(np.linalg.norm(p.orientation) - 1) < 1e-12
    x = np.random.default_rng(1).normal(size=(10, 3))
    assert np.allclose(p.to_body(p.to_world(x)), x, atol=1e-13)


def test_invalid_shapes():
    with pytest.raises(ValueError):
        MetaballShape([(0, 0, 0)], [-1.0])
    with pytest.raises(ValueError):
        MetaballShape([(0, 0, 0), (1, 0, 0)], [1.0])
    with pytest.raises(ValueError):
        MetaballShape(np.zeros((0, 3)), [])


def test_sphero_decompose_preserves_outer_surface():
    outer = MetaballShape([(-0.5, 0, 0), (0.5, 0, 0)], [0.6, 0.6])
    inner = mb.sphero_decompose(outer, 0.1)
    d = mb.fibonacci_sphere(64)
    surf, ok = mb.intersect_trajectories(outer, IDENTITY, 3 * d, np.zeros_like(d), tol=1e-10)
    assert ok.all()
    assert np.allclose(mb.evaluate(inner, surf) / inner.iso_value, 1.0, atol=1e-9)
    assert inner.sphero_radius == 0.1


def test_particle_file_roundtrip(tmp_path):
    text = """# two particles
sphere 2.0
2
-1 0 0 0.5
1 0 0 0.5
0.05
"""
    shapes = mb.parse_particle_file(text)
    assert len(shapes) == 2
    assert shapes[0].n == 1 and shapes[1].n == 2
    assert shapes[1].sphero_radius == pytest.approx(0.05)
    again = mb.parse_particle_file(mb.format_particle_file(shapes))
    for a, b in zip(shapes, again):
        assert np.allclose(a.weights, b.weights, rtol=1e-9)
        assert a.sphero_radius == pytest.approx(b.sphero_radius)


def test_particle_file_errors():
    with pytest.raises(ValueError):
        mb.parse_particle_file("2\n0 0 0 1\n")
