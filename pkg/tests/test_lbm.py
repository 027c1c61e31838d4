import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from solutegrain import lbm
from solutegrain.lbm import E, OPP, W, LatticeError, LatticeField, equilibrium, moments


def test_weight_table():
    assert W.sum() == pytest.approx(1.0, abs=1e-16)
    assert np.allclose(W @ E, 0.0, atol=1e-16)
    assert np.all(E[OPP] == -E)
    # second moment is c_s^2 I
    assert np.allclose(np.einsum("i,ia,ib->ab", W, E, E), np.eye(3) / 3)


def test_equilibrium_at_rest():
    assert np.allclose(equilibrium(1.3, np.zeros(3)), 1.3 * W)


small_u = st.floats(-0.1, 0.1, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.5, 2.0), small_u, small_u, small_u)
def test_equilibrium_moments(rho, ux, uy, uz):
    u = np.array([ux, uy, uz])
    g = equilibrium(rho, u)
    assert abs(g.sum() - rho) < 1e-14 * max(1, rho)
    assert np.allclose(E.T @ g, rho * u, atol=1e-13)


@pytest.mark.parametrize("rho,u", [(1.0, (0, 0, 0)), (2.0, (0.05, 0, 0))])
def test_moments_invert_equilibrium(rho, u):
    r, v = moments(equilibrium(rho, np.array(u, float)))
    assert r == pytest.approx(rho, abs=1e-14)
    assert np.allclose(v, u, atol=1e-14)


def test_moments_direct_summation():
    G = np.random.default_rng(0).uniform(0.01, 1.0, (19, 4, 3))
    rho, u = moments(G)
    for a in range(4):
        for b in range(3):
            r = sum(G[i, a, b] for i in range(19))
            m = [sum(G[i, a, b] * E[i, k] for i in range(19)) for k in range(3)]
            assert rho[a, b] == r
            assert np.allclose(u[:, a, b], np.array(m) / r, rtol=1e-15)


def test_moments_rejects_nonpositive_density():
    with pytest.raises(LatticeError):
        moments(np.zeros(19))


def test_rest_state_is_fixed_point():
    f = LatticeField((6, 5, 4), tau=0.9)
    G0 = f.G.copy()
    for _ in range(5):
        f.collide_stream()
    assert np.max(np.abs(f.G - G0)) < 1e-15


def test_uniform_flow_stays_equilibrium():
    f = LatticeField((6, 6, 6), dx=1.0, dt=1.0, tau=0.7)
    f.set_equilibrium(1.0, np.array([0.05, -0.02, 0.01]))
    G0 = f.G.copy()
    f.collide_stream()
    assert np.max(np.abs(f.G - G0)) < 1e-12


def test_mass_conservation_periodic():
    rng = np.random.default_rng(2)
    f = LatticeField((12, 10, 8), tau=0.8)
    f.set_equilibrium(1.0 + 0.01 * rng.normal(size=f.dims), 0.02 * rng.normal(size=(3,) + f.dims))
    m0 = f.G.sum()
    for _ in range(200):
        f.collide_stream()
        m = f.G.sum()
        assert abs(m - m0) / m0 < 1e-10
        m0 = m


def test_mass_conservation_walls():
    f = LatticeField((8, 8, 8), tau=0.8, boundary=("wall", "periodic", "wall"), acceleration=(1e-4, 0, 0))
    f.set_equilibrium(1.0, np.zeros(3))
    m0 = f.G.sum()
    for _ in range(1000):
        f.collide_stream()
    assert abs(f.G.sum() - m0) / m0 < 1e-10


def test_stored_moments_consistent_after_step():
    rng = np.random.default_rng(1)
    f = LatticeField((6, 6, 6), tau=0.9, acceleration=(1e-3, 0, 0))
    f.set_equilibrium(1.0, 0.01 * rng.normal(size=(3, 6, 6, 6)))
    f.collide_stream()
    rho, u = moments(f.G, f.acceleration_lattice())
    assert np.allclose(rho, f.rho, atol=1e-12)
    assert np.allclose(u, f.u, atol=1e-12)


def test_nan_aborts_with_cell():
    f = LatticeField((4, 4, 4))
    f.G[:, 1, 2, 3] = np.nan
    with pytest.raises(LatticeError, match="density at cell") as err:
        f.collide_stream()
    # the first bad cell reported is the seed or one of its lattice neighbours
    cell = np.array([int(v) for v in re.search(r"cell \((\d+), (\d+), (\d+)\)", str(err.value)).groups()])
    assert np.abs(cell - (1, 2, 3)).max() <= 1


def test_tau_guard():
    with pytest.raises(ValueError):
        LatticeField((4, 4, 4), tau=0.5)


def test_post_stream_hook_order():
    calls = []
    f = LatticeField((4, 4, 4))
    f.collide_stream(lambda fld: calls.append(fld.time_step))
    assert calls == [0] and f.time_step == 1


def test_unit_conversion():
    f = LatticeField((4, 4, 4), dx=1e-3, dt=2e-4, tau=0.8, rho_ref=1000.0)
    assert f.velocity_scale == pytest.approx(5.0)
    assert f.viscosity == pytest.approx(0.3 / 3 * 1e-6 / 2e-4)
    assert f.force_scale == pytest.approx(1000 * 1e-12 / 4e-8)
    assert np.allclose(f.node_positions(0), [0.5e-3, 1.5e-3, 2.5e-3, 3.5e-3])


@pytest.mark.parametrize("case", ["poiseuille", "couette", "shear-wave"])
def test_fluid_oracles(case):
    from solutegrain.validation import CASES

    res = CASES[case]()
    assert res.passed, res.report()


def test_diagnostics():
    f = LatticeField((4, 4, 4))
    f.set_equilibrium(1.0, np.array([0.1, 0, 0]))
    assert f.total_mass() == pytest.approx(64.0)
    assert f.max_speed() == pytest.approx(0.1)
    assert f.kinetic_energy() == pytest.approx(0.5 * 64 * 0.01)
    f.kind[0, 0, 0] = lbm.SOLID
    assert f.total_mass() == pytest.approx(63.0)
