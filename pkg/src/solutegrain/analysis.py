"""Post-processing: analytic point-source solutions, profile statistics,
dispersion-coefficient fits, dimensionless numbers and rank correlation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)


class AnalysisError(ValueError):
    pass


# ---------------------------------------------------------------------------
# analytic solutions


def analytic_point_source(x, t, M, D, x0, u=(0.0, 0.0, 0.0)):
    """Concentration of an instantaneous point release in an unbounded 3-D medium.

    ``C = M / (4 pi D t)^{3/2} exp(-|x - x0 - u t|^2 / (4 D t))``; ``x`` may be
    a single point or an array of shape (..., 3).
    """
    if t <= 0:
        raise AnalysisError("t must be positive")
    if D <= 0:
        raise AnalysisError("D must be positive")
    x = np.asarray(x, float)
    r = x - np.asarray(x0, float) - np.asarray(u, float) * t
    r2 = np.sum(r * r, axis=-1)
    return M / (4 * math.pi * D * t) ** 1.5 * np.exp(-r2 / (4 * D * t))


def analytic_marginal(s, t, M, D, s0, u=0.0, period=None, images=3):
    """Point-source solution integrated over the two transverse axes.

    Mass per unit length along one axis.  With ``period`` the periodic images
    ``s + k * period`` for ``|k| <= images`` are summed.
    """
    if t <= 0:
        raise AnalysisError("t must be positive")
    s = np.asarray(s, float)
    c = s - s0 - u * t
    ks = [0] if period is None else range(-images, images + 1)
    out = np.zeros_like(c)
    for k in ks:
        d = c + (0 if period is None else k * period)
        out += np.exp(-d * d / (4 * D * t))
    return M / math.sqrt(4 * math.pi * D * t) * out


def binned_marginal(edges, t, M, D, s0, u=0.0, period=None, images=3):
    """Exact bin averages of :func:`analytic_marginal` (error-function form)."""
    from scipy.special import erf

    edges = np.asarray(edges, float)
    ks = [0] if period is None else range(-images, images + 1)
    mass = np.zeros(len(edges) - 1)
    w = math.sqrt(4 * D * t)
    for k in ks:
        c = edges - s0 - u * t + (0 if period is None else k * period)
        cdf = 0.5 * erf(c / w)
        mass += np.diff(cdf)
    return M * mass / np.diff(edges)


# ---------------------------------------------------------------------------
# profiles


def fit_profile(centers, profile, method="moments"):
    """Mean and variance of a binned profile.

    ``moments`` uses the midpoint-rule first and second moments (the Gaussian
    maximum-likelihood estimates for binned data); ``lsq`` fits a Gaussian by
    nonlinear least squares.
    """
    centers = np.asarray(centers, float)
    p = np.asarray(profile, float)
    if np.any(p < 0):
        raise AnalysisError("profile must be non-negative")
    tot = p.sum()
    if not tot > 0:
        raise AnalysisError("profile has zero total mass")
    mean = float(np.sum(centers * p) / tot)
    var = float(np.sum((centers - mean) ** 2 * p) / tot)
    if method == "moments":
        return mean, var
    if method == "lsq":
        import warnings

        from scipy.optimize import OptimizeWarning, curve_fit

        def g(x, a, m, v):
            return a * np.exp(-((x - m) ** 2) / (2 * v))

        a0 = p.max()
        with warnings.catch_warnings():
            # a noise-free profile has no parameter covariance; only the estimate is used
            warnings.simplefilter("ignore", OptimizeWarning)
            popt, _ = curve_fit(g, centers, p, p0=(a0, mean, max(var, 1e-300)))
        return float(popt[1]), float(abs(popt[2]))
    raise AnalysisError(f"unknown fit method {method!r}")


def periodic_moments(centers, profile, period):
    """Circular mean and an unwrapped variance for profiles on a periodic axis."""
    p = np.asarray(profile, float)
    ang = 2 * math.pi * np.asarray(centers) / period
    z = np.sum(p * np.exp(1j * ang)) / p.sum()
    mean = (np.angle(z) % (2 * math.pi)) * period / (2 * math.pi)
    d = (np.asarray(centers) - mean + 0.5 * period) % period - 0.5 * period
    return float(mean), float(np.sum(p * d * d) / p.sum())


def skewness(centers, profile):
    p = np.asarray(profile, float)
    m, v = fit_profile(centers, p)
    return float(np.sum(p * (np.asarray(centers) - m) ** 3) / p.sum() / v**1.5)


@dataclass
class ProfileSeries:
    times: np.ndarray
    centers: np.ndarray
    profiles: np.ndarray  # (n_times, n_bins)
    means: np.ndarray = None
    variances: np.ndarray = None

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        self.centers = np.asarray(self.centers, float)
        self.profiles = np.asarray(self.profiles, float)
        if self.means is None or self.variances is None:
            mv = np.array([fit_profile(self.centers, p) for p in self.profiles]).reshape(-1, 2)
            self.means, self.variances = mv[:, 0], mv[:, 1]


# ---------------------------------------------------------------------------
# dispersion


@dataclass
class DispersionReport:
    K: float
    offset: float
    U_slip: float
    phi_solid: float
    D_alpha: float
    window: tuple
    r_squared: float
    R: float = float("nan")
    extra: dict = field(default_factory=dict)

    def as_text(self):
        lines = [
            f"K = {self.K:.10g}",
            f"offset = {self.offset:.10g}",
            f"U_slip = {self.U_slip:.10g}",
            f"phi_solid = {self.phi_solid:.10g}",
            f"D_alpha = {self.D_alpha:.10g}",
            f"window_start = {self.window[0]:.10g}",
            f"window_end = {self.window[1]:.10g}",
            f"r_squared = {self.r_squared:.10g}",
            f"R = {self.R:.10g}",
            "normalization = sigma^2/(2R)^2 versus U_slip*t/(2R); D_alpha = K/(1 - phi_solid)",
        ]
        lines += [f"{k} = {v}" for k, v in self.extra.items()]
        return "\n".join(lines) + "\n"


def _linfit(x, y):
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + icpt)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(icpt), float(r2)


def auto_window(x, y, min_points=10, rel_tol=0.1):
    """Index range of the longest suffix whose local slopes agree with its global slope.

    Local slopes come from a sliding window of about a fifth of the suffix
    (at least 5 samples); every one must lie within ``rel_tol`` of the
    suffix's least-squares slope.  When sampling noise keeps every suffix
    above ``rel_tol``, the suffix with the smallest worst deviation is used.
    """
    n = len(x)
    if n < min_points:
        raise AnalysisError(f"need at least {min_points} samples, got {n}")
    best, best_dev = n - min_points, np.inf
    for start in range(0, n - min_points + 1):
        xs, ys = x[start:], y[start:]
        g, _, _ = _linfit(xs, ys)
        if g == 0:
            continue
        w = max(5, len(xs) // 5)
        dev = 0.0
        for k in range(0, len(xs) - w + 1, max(1, w // 2)):
            loc, _, _ = _linfit(xs[k : k + w], ys[k : k + w])
            dev = max(dev, abs(loc - g) / abs(g))
            if dev > rel_tol and dev >= best_dev:
                break
        if dev <= rel_tol:
            return start, n
        if dev < best_dev:
            best, best_dev = start, dev
    log.info("no suffix within %.0f%% slope tolerance; closest deviates by %.1f%%", 100 * rel_tol, 100 * best_dev)
    return best, n


def dispersion_coefficient(times, variances, R, U_slip, phi_solid, window="auto"):
    """Fit ``sigma^2/(2R)^2 = K (U_slip/(2R)) t + offset`` and return ``D_alpha = K/(1-phi)``.

    ``window`` is ``'auto'``, ``None`` (all samples) or a ``(t_start, t_end)``
    pair of times.
    """
    t = np.asarray(times, float)
    v = np.asarray(variances, float)
    if not U_slip > 0:
        raise AnalysisError("U_slip must be positive")
    if not 0 <= phi_solid < 1:
        raise AnalysisError("solid fraction must lie in [0, 1)")
    x = U_slip * t / (2 * R)
    y = v / (2 * R) ** 2
    if window == "auto":
        i0, i1 = auto_window(x, y)
    elif window is None:
        i0, i1 = 0, len(t)
    else:
        sel = np.flatnonzero((t >= window[0]) & (t <= window[1]))
        if len(sel) == 0:
            raise AnalysisError("empty fit window")
        i0, i1 = sel[0], sel[-1] + 1
    if i1 - i0 < 10:
        raise AnalysisError(f"need at least 10 samples in the fit window, got {i1 - i0}")
    xs, ys = x[i0:i1], y[i0:i1]
    if np.ptp(xs) == 0:
        raise AnalysisError("degenerate time axis in fit window")
    K, off, r2 = _linfit(xs, ys)
    return DispersionReport(K, off, float(U_slip), float(phi_solid), K / (1 - phi_solid), (float(t[i0]), float(t[i1 - 1])), r2, float(R))


def slip_velocity(u_fluid, u_particle):
    """``max_t |<u>(t) - <u_p>(t)|``."""
    a = np.asarray(u_fluid, float)
    b = np.asarray(u_particle, float)
    if a.size == 0 or b.size == 0:
        raise AnalysisError("empty velocity series")
    if a.shape != b.shape:
        raise AnalysisError("velocity series must be aligned")
    return float(np.max(np.abs(a - b)))


def solid_fraction(particle_volumes, domain_volume):
    phi = float(np.sum(particle_volumes) / domain_volume)
    if not 0 <= phi < 1:
        raise AnalysisError(f"solid fraction {phi} outside [0, 1)")
    return phi


def reynolds_peclet(rho_f, U_p, L, mu, D):
    """``Re = rho_f U_p L / mu`` and ``Pe = U_p L / D``."""
    for name, v in (("rho_f", rho_f), ("U_p", U_p), ("L", L), ("mu", mu), ("D", D)):
        if not v > 0:
            raise AnalysisError(f"{name} must be positive")
    return rho_f * U_p * L / mu, U_p * L / D


# ---------------------------------------------------------------------------
# rank correlation


def spearman(xs, ys):
    """``1 - 6 S / (n (n^2 - 1))`` over rank differences; ties take average ranks."""
    xs = np.asarray(xs, float)
    ys = np.asarray(ys, float)
    if xs.shape != ys.shape:
        raise AnalysisError("series must have equal length")
    n = len(xs)
    if n < 2:
        raise AnalysisError("need at least two samples")
    d = rankdata(xs) - rankdata(ys)
    S = float(np.sum(d * d))
    return 1.0 - 6.0 * S / (n * (n * n - 1))


def correlation_matrix(table):
    """Spearman matrix over the columns of ``table`` (mapping name -> values)."""
    names = list(table)
    m = np.eye(len(names))
    for i, a in enumerate(names):
        for j in range(i + 1, len(names)):
            m[i, j] = m[j, i] = spearman(table[a], table[names[j]])
    return names, m
