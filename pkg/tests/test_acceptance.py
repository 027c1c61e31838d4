"""End-to-end acceptance checks, one test per criterion.

Every test prints a single ``criterion N ... PASS|FAIL`` line (visible in
``pytest -v`` output) before asserting.  The expensive scenario runs are
module fixtures so the conservation and exterior criteria can reuse them.
Expect the whole module to take the better part of an hour on one core.
"""
import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from solutegrain import analysis as an
from solutegrain import shape_metrics as sm
from solutegrain import validation as v
from solutegrain.metaball import MetaballShape


@pytest.fixture
def say(capsys):
    def emit(n, title, ok, detail=""):
        with capsys.disabled():
            print(f"\ncriterion {n} {title}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
    return emit


def failing(*results):
    return "; ".join(f"[{r.case}] {c.line()}" for r in results for c in r.checks if not c.passed)


def walker_checks(res):
    return [c for c in res.checks if "walker count" in c.name or "changed walker count" in c.name]


def exterior_checks(res):
    return [c for c in res.checks if "exterior" in c.name]


@pytest.fixture(scope="module")
def diffusion():
    return v.case_diffusion()


@pytest.fixture(scope="module")
def advection():
    return v.case_advection()


@pytest.fixture(scope="module")
def settling():
    return v.case_settling()


@pytest.fixture(scope="module")
def oscillator():
    return v.case_oscillator()


@pytest.fixture(scope="module")
def conservation():
    return v.case_conservation()


def test_criterion_01_pure_diffusion(diffusion, say):
    ok = diffusion.passed and diffusion.seconds < 300
    say(1, "pure diffusion", ok, f"({diffusion.seconds:.0f} s) {failing(diffusion)}")
    assert diffusion.passed, diffusion.report()
    assert diffusion.seconds < 300


def test_criterion_02_advection_diffusion(advection, say):
    say(2, "advection-diffusion", advection.passed, failing(advection))
    assert advection.passed, advection.report()
    assert any("drift" in c.name for c in advection.checks)


def test_criterion_03_walker_count_exact(diffusion, advection, settling, oscillator, conservation, say):
    runs = (diffusion, advection, settling, oscillator, conservation)
    checks = [c for r in runs for c in walker_checks(r)]
    ok = conservation.passed and all(c.passed for c in checks) and conservation.info["steps"] >= 10_000
    say(3, "walker count exact", ok, f"({len(checks)} checks, {conservation.info['steps']} steps) "
        + failing(conservation))
    assert conservation.info["steps"] >= 10_000
    assert conservation.info["particles"] == 50
    assert conservation.passed, conservation.report()
    assert checks and all(c.passed for c in checks)


def test_criterion_04_exterior_invariant(settling, oscillator, conservation, say):
    checks = [c for r in (settling, oscillator, conservation) for c in exterior_checks(r)]
    ok = bool(checks) and all(c.passed for c in checks)
    worst = max(c.value for c in checks)
    say(4, "exterior invariant", ok, f"(worst f - c = {worst:.3g})")
    assert ok, "\n".join(c.line() for c in checks)


def test_criterion_05_geometry_kernel(say):
    res = v.case_geometry(n=10_000)
    ok = res.passed and res.seconds < 60 and res.info["cases_per_suite"] >= 10_000
    say(5, "geometry kernel", ok, f"({res.seconds:.1f} s) {failing(res)}")
    assert res.info["cases_per_suite"] >= 10_000
    assert res.passed, res.report()
    assert res.seconds < 60


def test_criterion_06_lbm_physics(say):
    results = [v.case_poiseuille(), v.case_couette(), v.case_shear_wave()]
    ok = all(r.passed for r in results)
    say(6, "lattice Boltzmann physics", ok, failing(*results))
    assert ok, "\n".join(r.report() for r in results)


def test_criterion_07_coupling_physics(say):
    results = [v.case_drag(), v.case_comoving(), v.case_refill_mass()]
    ok = all(r.passed for r in results)
    say(7, "coupling physics", ok, failing(*results))
    assert ok, "\n".join(r.report() for r in results)


def test_criterion_08_settling_two_stages(settling, say):
    say(8, "settling interface two-stage pattern", settling.passed, failing(settling))
    assert settling.passed, settling.report()


def test_criterion_09_oscillator_dispersion(oscillator, say):
    vals = oscillator.info["D_alpha"]
    say(9, "oscillator dispersion", oscillator.passed and len(vals) == 3, f"D_alpha = {vals} {failing(oscillator)}")
    assert len(vals) == 3
    assert oscillator.passed, oscillator.report()


def test_criterion_10_shape_features(say):
    row = sm.compute_features(MetaballShape([(0, 0, 0)], [25.0]), resolution=0.1, n_orientations=64)
    expected = {"sphericity": 1.0, "circularity": 1.0, "diameter_ratio": 1.0, "corey_shape_factor": 1.0,
                "max_projected_area": 78.54}
    row_err = max(abs(getattr(row, k) / e - 1) for k, e in expected.items())
    pts = np.array([(0, 0, 0), (1.2, 0.4, 0), (0.3, 1.0, 0.6)])
    k = np.array([0.8, 0.6, 0.5])
    base = sm.compute_features(MetaballShape(pts, k), n_orientations=128).as_dict()
    rot_err = 0.0
    for rv in Rotation.random(3, random_state=7).as_rotvec():
        R = Rotation.from_rotvec(rv).as_matrix()
        turned = sm.compute_features(MetaballShape(pts @ R.T, k), n_orientations=128).as_dict()
        rot_err = max(rot_err, max(abs(turned[c] / base[c] - 1) for c in sm.ShapeFeatures.COLUMNS))
    ok = row_err <= 0.02 and rot_err <= 0.02
    say(10, "shape features", ok, f"(sphere row {row_err:.2%}, rotation {rot_err:.2%})")
    assert row_err <= 0.02
    assert rot_err <= 0.02


def point_source_residual(M=1.0, D=2e-3, t=0.4, u=(0.3, -0.1, 0.2), x0=(0.1, 0.0, -0.2), n=200, seed=0):
    """max |dC/dt + u.grad C - D lap C| over random points, by fourth-order differences."""
    u = np.asarray(u)
    sigma = math.sqrt(2 * D * t)
    rng = np.random.default_rng(seed)
    centre = np.asarray(x0) + u * t
    pts = centre + rng.normal(scale=1.5 * sigma, size=(n, 3))

    def C(x, tt):
        return an.analytic_point_source(x, tt, M, D, x0, u)

    def d1(f, h):
        return (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h)

    def d2(f, h):
        return (-f(2 * h) + 16 * f(h) - 30 * f(0.0) + 16 * f(-h) - f(-2 * h)) / (12 * h * h)

    h = 1e-2 * sigma
    ht = 1e-3 * t
    worst = 0.0
    for x in pts:
        dt = d1(lambda s: C(x, t + s), ht)
        adv = lap = 0.0
        for a in range(3):
            e = np.eye(3)[a]
            adv += u[a] * d1(lambda s: C(x + s * e, t), h)
            lap += d2(lambda s: C(x + s * e, t), h)
        worst = max(worst, abs(dt + adv - D * lap))
    peak = M / (4 * math.pi * D * t) ** 1.5
    return worst / peak


def test_criterion_11_analysis_math(say):
    hand = [((1, 2, 3, 4), (10, 20, 30, 40), 1.0), ((1, 2, 3, 4), (4, 3, 2, 1), -1.0),
            ((1, 2, 3, 4, 5), (2, 1, 4, 3, 5), 0.8)]
    sp_err = max(abs(an.spearman(x, y) - r) for x, y, r in hand)
    t = np.linspace(0.0, 2.0, 40)
    D, R, U = 3e-6, 2.5e-3, 4e-3
    rep = an.dispersion_coefficient(t, 2 * D * t + 1e-7, R, U, 0.0, window=None)
    fit_err = abs(rep.K / (D / (R * U)) - 1)
    pde = point_source_residual()
    ok = sp_err <= 1e-12 and fit_err <= 1e-10 and pde < 1e-6
    say(11, "analysis math", ok, f"(spearman {sp_err:.1e}, fit {fit_err:.1e}, PDE residual / C_peak {pde:.1e})")
    assert sp_err <= 1e-12
    assert fit_err <= 1e-10
    assert pde < 1e-6
