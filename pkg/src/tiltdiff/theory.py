"""Exact analysis of the symmetric two-mode family.

The generator family is ``q_alpha = (1 - alpha) N(-mu, sigma^2) + alpha N(mu, sigma^2)``
noised by a VP process with ``alpha_bar = exp(-gamma t)``.  Objectives over
``alpha`` are evaluated without any well-separation approximation:

* the x-integrals use composite Gauss-Legendre rules split at zero and at the
  reward breakpoints;
* the time integral over ``(0, inf)`` is mapped to ``v = exp(-gamma t / 2)`` in
  ``(0, 1)``, where the integrand is smooth and vanishes linearly at ``v = 0``.

Log-densities that do not depend on ``alpha`` are cached per grid, so sweeps
over ``alpha`` and ``tau`` only redo the mixing.
"""

import functools
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtr

from . import analytic
from .analytic import GmmSpec, RewardSpec, VpSchedule
from .errors import ConvexityError, QuadratureError

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


# collapse threshold


def collapse_threshold(mu, sigma, gamma):
    """Largest temperature at which the terminal-reward objective collapses.

    ``gamma (1 - sigma^2) / (2 mu^2 (-log sigma^2))``, with the limit
    ``gamma / (2 mu^2)`` used when ``|sigma^2 - 1| < 1e-8``.
    """
    if mu < 0 or sigma <= 0 or gamma <= 0:
        raise ValueError("need mu >= 0, sigma > 0, gamma > 0")
    if mu == 0:
        return np.inf
    d = sigma * sigma - 1.0
    if abs(d) < 1e-8:
        return gamma / (2.0 * mu * mu)
    return gamma * (-d) / (2.0 * mu * mu * (-np.log1p(d)))


def well_separated_rate(mu, sigma, gamma, t):
    """``2 m_t^2 / Sigma_t``: the large-separation slope of the divergence at alpha = 1."""
    ab = np.exp(-gamma * np.asarray(t, dtype=np.float64))
    return 2.0 * ab * mu * mu / (ab * sigma * sigma + 1.0 - ab)


def b_crit_quadrature(mu, sigma, gamma):
    """Integral of ``2 m_t^2 / Sigma_t`` over t in (0, inf), via u = exp(-gamma t)."""
    if sigma <= 0 or gamma <= 0:
        raise ValueError("need sigma > 0 and gamma > 0")
    c = 1.0 - sigma * sigma
    return analytic.quad(lambda u: 2.0 * mu * mu / (gamma * (1.0 - u * c)), 0.0, 1.0, epsabs=1e-14, epsrel=1e-13)


# the alpha family


@dataclass(frozen=True)
class AlphaFamily:
    """Two-mode family around a symmetric reference, noised by ``schedule``."""

    base: GmmSpec = GmmSpec.symmetric_bimodal(2.0, 0.5)
    schedule: VpSchedule = VpSchedule(t_max=np.inf)

    def __post_init__(self):
        b = self.base
        if len(b.weights) != 2 or b.weights != (0.5, 0.5) or b.means[0] != -b.means[1] or b.variances[0] != b.variances[1]:
            raise ValueError("the alpha family needs a symmetric two-component reference")
        if b.means[1] <= 0:
            raise ValueError("reference modes must sit at -mu < 0 < mu")

    @classmethod
    def symmetric(cls, mu=2.0, sigma=0.5, gamma=20.0):
        return cls(GmmSpec.symmetric_bimodal(mu, sigma), VpSchedule(gamma=gamma, t_max=np.inf))

    @property
    def mu(self):
        return self.base.means[1]

    @property
    def sigma(self):
        return float(np.sqrt(self.base.variances[1]))

    @property
    def gamma(self):
        return self.schedule.gamma

    def mixture(self, alpha):
        _check_alpha(alpha)
        return GmmSpec((1.0 - alpha, alpha), self.base.means, self.base.variances)

    def mode_params(self, t):
        """(m_t, Sigma_t) of the positive mode at time(s) ``t``."""
        ab = np.exp(-self.gamma * np.asarray(t, dtype=np.float64))
        return np.sqrt(ab) * self.mu, ab * self.sigma**2 + 1.0 - ab


@dataclass(frozen=True)
class QuadConfig:
    """Fixed-rule sizes: time nodes, x panels, nodes per panel, x half-range in std units."""

    time_nodes: int = 96
    x_panels: int = 24
    panel_nodes: int = 32
    width: float = 12.0


def _check_alpha(alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha={alpha} outside [0, 1]")


def _composite_rule(edges, n):
    nodes, weights = np.polynomial.legendre.leggauss(n)
    edges = np.asarray(edges, dtype=np.float64)
    a, b = edges[:-1, None], edges[1:, None]
    half = 0.5 * (b - a)
    return ((a + b) / 2 + half * nodes).ravel(), (half * weights).ravel()


_INNER_EDGES = (-0.3, -0.1, -0.03, 0.03, 0.1, 0.3)


def _x_rule(half_range, quad, extra=()):
    """Composite rule on [-half_range, half_range], refined near zero."""
    edges = np.linspace(-half_range, half_range, 2 * (quad.x_panels // 2) + 1)
    pts = [e for e in tuple(_INNER_EDGES) + tuple(extra) if -half_range < e < half_range]
    edges = np.unique(np.concatenate([edges, pts]))
    return _composite_rule(edges, quad.panel_nodes)


def _log_mix(alpha, log_minus, log_plus):
    with np.errstate(divide="ignore"):
        return np.logaddexp(np.log1p(-alpha) + log_minus, np.log(alpha) + log_plus)


def _kl_rows(alpha, log_minus, log_plus, log_target, weights):
    log_q = _log_mix(alpha, log_minus, log_plus)
    q = np.exp(log_q)
    integrand = np.where(q > 0, q * (log_q - log_target), 0.0)
    return np.sum(weights * integrand, axis=-1)


@dataclass(frozen=True)
class _TimeGrid:
    t: np.ndarray
    time_weights: np.ndarray
    x: np.ndarray
    x_weights: np.ndarray
    log_minus: np.ndarray
    log_plus: np.ndarray
    log_reference: np.ndarray


@functools.lru_cache(maxsize=32)
def _time_grid(family, quad):
    v, wv = np.polynomial.legendre.leggauss(quad.time_nodes)
    v = 0.5 * (v + 1.0)
    wv = 0.5 * wv
    t = -2.0 * np.log(v) / family.gamma
    time_weights = 2.0 * wv / (family.gamma * v)
    m, var = family.mode_params(t)
    rows = [_x_rule(mi + quad.width * np.sqrt(vi), quad) for mi, vi in zip(m, var)]
    x = np.stack([r[0] for r in rows])
    xw = np.stack([r[1] for r in rows])
    log_minus = _normal_logpdf(x, -m[:, None], var[:, None])
    log_plus = _normal_logpdf(x, m[:, None], var[:, None])
    log_ref = np.logaddexp(log_minus, log_plus) + np.log(0.5)
    return _TimeGrid(t, time_weights, x, xw, log_minus, log_plus, log_ref)


@functools.lru_cache(maxsize=64)
def _tilted_rows(family, quad, reward):
    grid = _time_grid(family, quad)
    log_z = analytic.tilted_log_partition(family.base, reward)
    rows = [
        analytic.log_tilted_marginal(family.base, reward, family.schedule, t, x, log_z)
        for t, x in zip(grid.t, grid.x)
    ]
    return np.stack(rows)


def _normal_logpdf(x, mean, var):
    return -0.5 * (np.log(2.0 * np.pi * var) + (x - mean) ** 2 / var)


def _integrate_time(grid, rate):
    if not np.all(np.isfinite(rate)):
        bad = int(np.flatnonzero(~np.isfinite(rate))[0])
        raise QuadratureError("non-finite divergence rate", interval=(float(grid.t[bad]), float(grid.t[bad])))
    return float(np.sum(grid.time_weights * rate))


def _default_reward(reward, tau):
    reward = RewardSpec(kind="hard") if reward is None else reward
    return reward if tau is None else reward.replace(tau=tau)


def expected_reward(alpha, family, reward=None):
    """E[r] under ``q_alpha`` at t = 0 (closed form per component)."""
    _check_alpha(alpha)
    reward = _default_reward(reward, None)
    e, _ = reward.gaussian_reward(np.asarray(family.base.means), np.full(2, family.sigma))
    return float((1.0 - alpha) * e[0] + alpha * e[1])


def divergence_integral(alpha, family, quad=QuadConfig()):
    """Integral over t in (0, inf) of KL(q_{alpha,t} || q_t)."""
    _check_alpha(alpha)
    g = _time_grid(family, quad)
    rate = _kl_rows(alpha, g.log_minus, g.log_plus, g.log_reference, g.x_weights)
    return _integrate_time(g, rate)


def divergence_integral_derivative(alpha, family, quad=QuadConfig()):
    """d/dalpha of :func:`divergence_integral`, exact including one-sided ends.

    Uses ``dKL/dalpha = int (phi_+ - phi_-) log(q_alpha / q_t) dx``, which stays
    finite at alpha in {0, 1} even though finite differences converge to it
    very slowly there.
    """
    _check_alpha(alpha)
    g = _time_grid(family, quad)
    log_q = _log_mix(alpha, g.log_minus, g.log_plus)
    gap = np.exp(g.log_plus) - np.exp(g.log_minus)
    rate = np.sum(g.x_weights * gap * (log_q - g.log_reference), axis=-1)
    return _integrate_time(g, rate)


def divergence_rate(alpha, t, family, quad=QuadConfig()):
    """KL(q_{alpha,t} || q_t) at a single time."""
    _check_alpha(alpha)
    m, var = family.mode_params(t)
    x, w = _x_rule(m + quad.width * np.sqrt(var), quad)
    lm, lp = _normal_logpdf(x, -m, var), _normal_logpdf(x, m, var)
    return float(_kl_rows(alpha, lm, lp, np.logaddexp(lm, lp) + np.log(0.5), w))


def l_term_alpha(alpha, tau, family, reward=None, quad=QuadConfig()):
    """Terminal reward plus tau times the trajectory KL to the untilted reference."""
    return -expected_reward(alpha, family, reward) + tau * divergence_integral(alpha, family, quad)


def l_term_alpha_derivative(alpha, tau, family, reward=None, quad=QuadConfig()):
    reward = _default_reward(reward, None)
    e, _ = reward.gaussian_reward(np.asarray(family.base.means), np.full(2, family.sigma))
    return float(e[0] - e[1]) + tau * divergence_integral_derivative(alpha, family, quad)


def _clean_rule(family, reward, quad):
    half = family.mu + quad.width * family.sigma
    return _x_rule(half, quad, extra=reward.breakpoints)


def kl_to_reference(alpha, family, quad=QuadConfig()):
    """KL(q_{alpha,0} || q_0)."""
    _check_alpha(alpha)
    x, w = _clean_rule(family, RewardSpec(kind="constant"), quad)
    lm = _normal_logpdf(x, -family.mu, family.sigma**2)
    lp = _normal_logpdf(x, family.mu, family.sigma**2)
    return float(_kl_rows(alpha, lm, lp, np.logaddexp(lm, lp) + np.log(0.5), w))


def kl_to_target(alpha, family, reward, quad=QuadConfig()):
    """KL(q_{alpha,0} || q*), with q* normalised by quadrature."""
    _check_alpha(alpha)
    x, w = _clean_rule(family, reward, quad)
    lm = _normal_logpdf(x, -family.mu, family.sigma**2)
    lp = _normal_logpdf(x, family.mu, family.sigma**2)
    log_z = analytic.tilted_log_partition(family.base, reward)
    log_target = family.base.log_density(x) + reward(x) / reward.tau - log_z
    return float(_kl_rows(alpha, lm, lp, log_target, w))


def l_rlhf_alpha(alpha, tau, family, reward=None, quad=QuadConfig()):
    """KL-regularised reward objective at t = 0."""
    reward = _default_reward(reward, tau)
    return -expected_reward(alpha, family, reward) + tau * kl_to_reference(alpha, family, quad)


def l_ikl_alpha(alpha, tau, family, reward=None, quad=QuadConfig()):
    """Integral over t in (0, inf) of KL(q_{alpha,t} || q_t*)."""
    _check_alpha(alpha)
    reward = _default_reward(reward, tau)
    g = _time_grid(family, quad)
    rate = _kl_rows(alpha, g.log_minus, g.log_plus, _tilted_rows(family, quad, reward), g.x_weights)
    return _integrate_time(g, rate)


# minimisation


def check_convexity(objective, tau, points=50, tol=1e-6):
    """Raise :class:`ConvexityError` if any second difference on the grid is below ``-tol``."""
    alphas = np.linspace(0.0, 1.0, points)
    values = np.array([objective(a, tau) for a in alphas])
    second = values[:-2] - 2.0 * values[1:-1] + values[2:]
    worst = int(np.argmin(second))
    if second[worst] < -tol:
        raise ConvexityError("objective is not convex in alpha", alpha=alphas[worst + 1], second_difference=second[worst])
    return second


def minimize_alpha(objective, tau, tol=1e-6, convexity_points=50, convexity_tol=1e-6, derivative=None):
    """Minimise a convex ``objective(alpha, tau)`` over [0, 1].

    Convexity is checked on a grid first (skip with ``convexity_points=0``).
    With an exact ``derivative(alpha, tau)`` the boundary test uses the
    one-sided slopes (minimum at 1 iff the slope at 1 is <= 0, at 0 iff the
    slope at 0 is >= 0) and interior minima are found by bisection on the
    slope sign.  Without one, golden-section search is used and the endpoints
    are compared by value.  Boundary minima come back as exactly 0.0 or 1.0.
    """
    if convexity_points:
        check_convexity(objective, tau, convexity_points, convexity_tol)
    if derivative is not None:
        if derivative(1.0, tau) <= 0:
            return 1.0
        if derivative(0.0, tau) >= 0:
            return 0.0
        lo, hi = 0.0, 1.0
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if derivative(mid, tau) < 0:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)
    lo, hi = 0.0, 1.0
    c = hi - _GOLDEN * (hi - lo)
    d = lo + _GOLDEN * (hi - lo)
    fc, fd = objective(c, tau), objective(d, tau)
    while hi - lo > tol:
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - _GOLDEN * (hi - lo)
            fc = objective(c, tau)
        else:
            lo, c, fc = c, d, fd
            d = lo + _GOLDEN * (hi - lo)
            fd = objective(d, tau)
    inner = 0.5 * (lo + hi)
    candidates = [(objective(0.0, tau), 0.0), (objective(1.0, tau), 1.0), (objective(inner, tau), inner)]
    best_value = min(v for v, _ in candidates)
    for value, alpha in candidates:
        if value == best_value:
            return alpha
    raise AssertionError("unreachable")


@dataclass
class ScanRow:
    mu: float
    sigma: float
    gamma: float
    tau: float
    tau_crit_closed: float
    tau_crit_bracket_lo: float
    tau_crit_bracket_hi: float
    alpha_star: float


SCAN_COLUMNS = tuple(ScanRow.__dataclass_fields__)


def threshold_scan(family, taus=None, reward=None, quad=QuadConfig(), points=21, span=(0.8, 1.2)):
    """alpha*(tau) for the terminal objective across a band around the closed-form threshold.

    The bracket is the last scanned tau with a boundary minimiser and the
    first with an interior one; NaN on the missing side if the scan never
    crosses.
    """
    tau_crit = collapse_threshold(family.mu, family.sigma, family.gamma)
    if taus is None:
        taus = np.linspace(span[0] * tau_crit, span[1] * tau_crit, points)

    stars = [_term_minimizer(family, float(tau), reward, quad) for tau in taus]
    collapsed = [tau for tau, a in zip(taus, stars) if a == 1.0]
    interior = [tau for tau, a in zip(taus, stars) if a < 1.0]
    lo = float(max(collapsed)) if collapsed else np.nan
    hi = float(min(interior)) if interior else np.nan
    return [
        ScanRow(family.mu, family.sigma, family.gamma, float(tau), tau_crit, lo, hi, float(a))
        for tau, a in zip(taus, stars)
    ]


def _term_minimizer(family, tau, reward=None, quad=QuadConfig(), convexity_points=0):
    return minimize_alpha(
        lambda a, tt: l_term_alpha(a, tt, family, reward, quad),
        tau,
        convexity_points=convexity_points,
        derivative=lambda a, tt: l_term_alpha_derivative(a, tt, family, reward, quad),
    )


def term_minimizer(family, tau, reward=None, quad=QuadConfig()):
    """alpha* of the terminal objective, with the convexity check enabled."""
    return _term_minimizer(family, tau, reward, quad, convexity_points=50)


def refine_transition(family, lo, hi, reward=None, quad=QuadConfig(), tol=1e-6):
    """Bisect the temperature at which the minimiser leaves alpha = 1."""

    def collapsed(tau):
        return _term_minimizer(family, tau, reward, quad) == 1.0

    if not (collapsed(lo) and not collapsed(hi)):
        raise ValueError("bracket does not straddle the transition")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if collapsed(mid):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# gradient check


@dataclass
class GradientCheckRow:
    alpha: float
    t: float
    finite_difference: float
    score_form: float
    rel_error: float


@dataclass
class GradientCheckReport:
    rows: list

    @property
    def max_rel_error(self):
        return max(r.rel_error for r in self.rows)


def _tilted_kl_at(alpha, t, family, reward, quad):
    m, var = family.mode_params(t)
    x, w = _x_rule(m + quad.width * np.sqrt(var), quad)
    lm, lp = _normal_logpdf(x, -m, var), _normal_logpdf(x, m, var)
    log_target = analytic.log_tilted_marginal(family.base, reward, family.schedule, t, x)
    return float(_kl_rows(alpha, lm, lp, log_target, w))


def _mixture_score(alpha, m, var, y):
    lm = np.log1p(-alpha) + _normal_logpdf(y, -m, var)
    lp = np.log(alpha) + _normal_logpdf(y, m, var)
    r_plus = expit(lp - lm)
    return ((1.0 - r_plus) * (-m - y) + r_plus * (m - y)) / var


def score_form_derivative(alpha, t, family, reward, quad=QuadConfig(), hermite_nodes=64):
    """d/dalpha KL(q_{alpha,t} || q_t*) as a score-mismatch contraction.

    ``E[(s_alpha - s*)(x_t) * dx_t/dalpha]`` with ``x0`` reparameterised by the
    inverse CDF of ``q_alpha``: ``dx0/dalpha = -(Phi_+ - Phi_-)(x0) / q_alpha(x0)``,
    so the density cancels and the expectation becomes an x0-integral of
    ``-sqrt(abar) (Phi_+ - Phi_-)(x0) E_eps[(s_alpha - s*)(sqrt(abar) x0 + sigma eps)]``.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("the score form needs an interior alpha")
    x0, w0, weps, y, target = _score_form_grid(family, reward, float(t), quad, hermite_nodes)
    m, var = family.mode_params(t)
    mismatch = np.sum(weps * (_mixture_score(alpha, m, var, y) - target), axis=1)
    cdf_gap = ndtr((x0 - family.mu) / family.sigma) - ndtr((x0 + family.mu) / family.sigma)
    return float(-family.schedule.alpha(t) * np.sum(w0 * cdf_gap * mismatch))


@functools.lru_cache(maxsize=64)
def _score_form_grid(family, reward, t, quad, hermite_nodes):
    """x0 rule, Hermite weights, noised points and the tilted score there (alpha-free)."""
    x0, w0 = _x_rule(family.mu + quad.width * family.sigma, quad)
    eps, weps = np.polynomial.hermite_e.hermegauss(hermite_nodes)
    weps = weps / np.sqrt(2.0 * np.pi)
    y = float(family.schedule.alpha(t)) * x0[:, None] + float(family.schedule.sigma(t)) * eps[None, :]
    target = analytic.tilted_score(family.base, reward, family.schedule, t, y.ravel()).reshape(y.shape)
    return x0, w0, weps, y, target


def ikl_gradient_check(family, reward, tau, alphas, t_grid, step=1e-4, quad=QuadConfig()):
    """Central finite differences of the per-time divergence against the score form."""
    alphas = np.atleast_1d(np.asarray(alphas, dtype=np.float64))
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=np.float64))
    if t_grid.size == 0 or alphas.size == 0:
        raise ValueError("empty alpha or time grid")
    if np.any(t_grid <= 0):
        raise ValueError("time grid must be positive")
    if np.any(alphas - step <= 0) or np.any(alphas + step >= 1):
        raise ValueError("alphas must be interior with room for the finite-difference step")
    reward = reward.replace(tau=tau)
    rows = []
    for alpha in alphas:
        for t in t_grid:
            fd = (
                _tilted_kl_at(alpha + step, t, family, reward, quad) - _tilted_kl_at(alpha - step, t, family, reward, quad)
            ) / (2.0 * step)
            sf = score_form_derivative(alpha, t, family, reward, quad)
            rows.append(GradientCheckRow(float(alpha), float(t), fd, sf, abs(fd - sf) / max(abs(fd), 1e-300)))
    return GradientCheckReport(rows)


# evaluation metrics


def positive_mass(samples):
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("no samples")
    return float(np.mean(samples > 0))


def target_mass(tau):
    """P(x > 0) under the tilted target for the hard reward on well-separated modes."""
    return float(expit(1.0 / tau))


def _tail_bin_edges(edges, gmm):
    lo, hi = gmm.support(width=14.0)
    out = edges.copy()
    out[0] = min(edges[0], lo)
    out[-1] = max(edges[-1], hi)
    return out


def kl_to_tilted(samples, gmm, reward, bins=60, bounds=None, quad=QuadConfig()):
    """Histogram estimate of KL(p || q*) on a fixed grid.

    ``samples`` is an array of draws (counts are Laplace smoothed) or a
    callable density, integrated over the bins.  The outer bins absorb the
    tails on both sides.
    """
    if bins < 2:
        raise ValueError("need at least two bins")
    if bounds is None:
        mu = float(np.max(np.abs(gmm.m)))
        sd = float(np.sqrt(np.max(gmm.v)))
        bounds = (-mu - 6.0 * sd, mu + 6.0 * sd)
    if not bounds[0] < bounds[1]:
        raise ValueError(f"bad histogram bounds {bounds}")
    edges = np.linspace(bounds[0], bounds[1], bins + 1)
    wide = _tail_bin_edges(edges, gmm)
    log_z = analytic.tilted_log_partition(gmm, reward)
    target = _bin_masses(lambda x: analytic.tilted_density(gmm, reward, x, log_z), wide, reward.breakpoints, quad)
    target = target / target.sum()
    if callable(samples):
        p = _bin_masses(samples, wide, reward.breakpoints, quad)
        p = p / p.sum()
    else:
        samples = np.asarray(samples, dtype=np.float64)
        if samples.size == 0:
            raise ValueError("no samples")
        counts = np.histogram(np.clip(samples, edges[0], edges[-1]), bins=edges)[0]
        p = (counts + 1.0) / (samples.size + bins)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(target[mask]))))


def _bin_masses(density, edges, breakpoints, quad):
    masses = np.empty(len(edges) - 1)
    for i, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
        cuts = [a] + [c for c in breakpoints if a < c < b] + [b]
        x, w = _composite_rule(cuts, quad.panel_nodes)
        masses[i] = np.sum(w * density(x))
    return masses
