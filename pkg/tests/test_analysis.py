import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from solutegrain import analysis as an
from solutegrain.analysis import AnalysisError


def test_point_source_unit_value():
    assert an.analytic_point_source((0.3, 0.2, 0.1), 1 / (4 * math.pi), 1.0, 1.0, (0.3, 0.2, 0.1)) == pytest.approx(1.0)


def test_point_source_peak_moves_with_flow():
    M, D, t = 2.0, 0.5, 0.7
    u = np.array([0.1, -0.2, 0.3])
    peak = an.analytic_point_source(u * t, t, M, D, (0, 0, 0), u)
    assert peak == pytest.approx(M / (4 * math.pi * D * t) ** 1.5, rel=1e-14)


def test_point_source_integrates_to_mass():
    M, D, t = 3.0, 0.2, 0.5
    L = 10 * math.sqrt(2 * D * t)
    val, _ = integrate.tplquad(
        lambda z, y, x: an.analytic_point_source((x, y, z), t, M, D, (0, 0, 0)),
        -L, L, -L, L, -L, L, epsabs=1e-10, epsrel=1e-9)
    assert val == pytest.approx(M, rel=1e-6)


def test_point_source_rejects_bad_time():
    with pytest.raises(AnalysisError):
        an.analytic_point_source((0, 0, 0), 0.0, 1.0, 1.0, (0, 0, 0))


def test_marginal_and_binned_agree():
    edges = np.linspace(0, 1, 101)
    c = 0.5 * (edges[1:] + edges[:-1])
    a = an.analytic_marginal(c, 0.01, 1.0, 0.5, 0.5, period=1.0)
    b = an.binned_marginal(edges, 0.01, 1.0, 0.5, 0.5, period=1.0)
    # midpoint rule against exact bin averages: error ~ h^2 f''/24
    assert np.abs(a - b).max() < 2e-3 * a.max()
    assert b.sum() * 0.01 == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("var", [4.0, 9.3, 25.0])
def test_fit_recovers_gaussian_variance(var):
    x = np.arange(-60, 61, dtype=float)
    p = np.exp(-x**2 / (2 * var))
    m, v = an.fit_profile(x, p)
    assert abs(m) < 1e-12
    assert v == pytest.approx(var, rel=5e-3)
    assert an.fit_profile(x, p, "lsq")[1] == pytest.approx(var, rel=5e-3)


def test_fit_two_spikes_and_single_bin():
    x = np.arange(-5, 6, dtype=float)
    p = np.zeros_like(x)
    p[[2, 8]] = 1.0
    assert an.fit_profile(x, p) == pytest.approx((0.0, 9.0))
    q = np.zeros_like(x)
    q[4] = 7.0
    assert an.fit_profile(x, q)[1] <= 1.0 / 12


def test_fit_errors():
    with pytest.raises(AnalysisError):
        an.fit_profile([0, 1], [0, 0])
    with pytest.raises(AnalysisError):
        an.fit_profile([0, 1], [1, -1])
    with pytest.raises(AnalysisError):
        an.fit_profile([0, 1], [1, 1], "median")


def test_periodic_moments_wrap():
    x = np.arange(20) + 0.5
    p = np.zeros(20)
    p[[0, 19]] = 1.0
    m, v = an.periodic_moments(x, p, 20.0)
    assert min(m, 20 - m) == pytest.approx(0.0, abs=1e-9)
    assert v == pytest.approx(0.25)


def test_skewness_of_symmetric_profile():
    x = np.arange(-10, 11, dtype=float)
    assert abs(an.skewness(x, np.exp(-x**2 / 8))) < 1e-12


def test_profile_series_fills_moments():
    x = np.arange(-20, 21, dtype=float)
    s = an.ProfileSeries([1, 2], x, [np.exp(-x**2 / 2), np.exp(-x**2 / 8)])
    assert np.allclose(s.variances, [1, 4], rtol=1e-6)


def test_dispersion_exact_line():
    D, R, U = 3e-6, 2.5e-3, 4e-3
    t = np.linspace(0.01, 1, 50)
    rep = an.dispersion_coefficient(t, 2 * D * t, R, U, 0.0, window=None)
    assert rep.K == pytest.approx(2 * D / (2 * R * U), rel=1e-10)
    # unwind the normalisation
    assert rep.K * U * (2 * R) / 2 == pytest.approx(D, rel=1e-10)
    assert rep.r_squared == pytest.approx(1.0)


def test_dispersion_unit_slope():
    t = np.linspace(0, 1, 20)
    rep = an.dispersion_coefficient(t, t, 0.5, 1.0, 0.0, window=None)
    assert rep.K == pytest.approx(1.0) and rep.D_alpha == pytest.approx(1.0)


def test_solid_fraction_of_sphere_pack():
    phi = an.solid_fraction([4 / 3 * math.pi * 5**3] * 50, 120 * 120 * 180)
    assert phi == pytest.approx(0.0101, abs=5e-5)
    t = np.linspace(0, 1, 20)
    rep = an.dispersion_coefficient(t, 4 * t, 0.5, 1.0, phi, window=None)
    assert rep.D_alpha == pytest.approx(rep.K / (1 - phi))


def test_auto_window_skips_transient():
    t = np.linspace(0, 10, 200)
    # steep transient, then a line of slope 4
    v = np.where(t < 2, t**3, 8 + 4 * (t - 2))
    rep = an.dispersion_coefficient(t, v, 0.5, 1.0, 0.0)
    # the sliding-slope test may admit a few transient samples at the start
    assert rep.window[0] >= 1.5
    assert rep.K == pytest.approx(4.0, rel=0.02)
    assert an.dispersion_coefficient(t, v, 0.5, 1.0, 0.0, window=(2.0, 10.0)).K == pytest.approx(4.0, rel=1e-10)


def test_auto_window_noisy_line_keeps_long_suffix(caplog):
    # noise too large for any suffix to pass the 10% slope test
    t = np.linspace(0, 1, 200)
    v = 1.0 + 0.5 * t + np.random.default_rng(3).normal(scale=0.02, size=t.size)
    with caplog.at_level("INFO", logger="solutegrain.analysis"):
        rep = an.dispersion_coefficient(t, v, 0.5, 1.0, 0.0)
    assert "no suffix within" in caplog.text
    # the closest suffix, not the last few samples
    assert rep.window[0] < 0.5
    assert rep.K == pytest.approx(0.5, rel=0.05)


def test_dispersion_errors():
    t = np.linspace(0, 1, 20)
    with pytest.raises(AnalysisError):
        an.dispersion_coefficient(t, t, 1.0, 0.0, 0.0)
    with pytest.raises(AnalysisError):
        an.dispersion_coefficient(t, t, 1.0, 1.0, 1.0)
    with pytest.raises(AnalysisError):
        an.dispersion_coefficient(t, t, 1.0, 1.0, 0.0, window=(0.0, 0.1))


def test_report_text_fields():
    rep = an.dispersion_coefficient(np.linspace(0, 1, 20), np.linspace(0, 2, 20), 1.0, 1.0, 0.1, window=None)
    text = rep.as_text()
    for key in ("K =", "D_alpha =", "r_squared =", "window_start =", "normalization ="):
        assert key in text


def test_slip_velocity():
    t = np.linspace(0, 2 * math.pi, 2001)
    assert an.slip_velocity(np.sin(t), np.sin(t)) == 0.0
    assert an.slip_velocity(np.sin(t), np.zeros_like(t)) == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(AnalysisError):
        an.slip_velocity([1, 2], [1])


def test_reynolds_peclet():
    Re, Pe = an.reynolds_peclet(1000, 0.01, 0.02, 1e-3, 2e-9)
    assert Re == pytest.approx(200)
    assert Pe / Re == pytest.approx(500)
    assert an.reynolds_peclet(1, 2, 0.5, 1, 1.0)[1] == pytest.approx(1.0)
    with pytest.raises(AnalysisError):
        an.reynolds_peclet(1000, 0.01, 0.02, 0.0, 1e-9)


@pytest.mark.parametrize("xs,ys,r", [
    ((1, 2, 3, 4), (10, 20, 30, 40), 1.0),
    ((1, 2, 3, 4), (4, 3, 2, 1), -1.0),
    ((1, 2, 3, 4, 5), (2, 1, 4, 3, 5), 0.8),
])
def test_spearman_examples(xs, ys, r):
    assert an.spearman(xs, ys) == pytest.approx(r)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=3, max_size=30, unique=True), st.randoms())
def test_spearman_matches_scipy_without_ties(xs, rnd):
    from scipy.stats import spearmanr

    ys = list(xs)
    rnd.shuffle(ys)
    assert an.spearman(xs, ys) == pytest.approx(spearmanr(xs, ys).statistic, abs=1e-12)


def test_correlation_matrix_symmetric():
    names, m = an.correlation_matrix({"a": [1, 2, 3], "b": [3, 1, 2], "c": [1, 3, 2]})
    assert names == ["a", "b", "c"]
    assert np.allclose(m, m.T) and np.allclose(np.diag(m), 1)
