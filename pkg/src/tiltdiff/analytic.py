"""Closed-form and quadrature results for 1-D Gaussian-mixture references.

Everything here is exact up to quadrature error: forward marginals, scores,
posteriors ``q(x0 | xt)``, the reward-tilted target ``q*`` and its diffused
marginals, the diffused reward score, and the rectified-flow velocity.

Tilt expectations are carried in a scaled form, ``E[exp((r - r_max) / tau)]``,
so that small temperatures do not overflow; every ratio we need is invariant
to that scale.
"""

from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import expit, logsumexp, ndtr

from .errors import QuadratureError

_LOG_2PI = np.log(2.0 * np.pi)
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(64)


def _normal_pdf(z):
    return np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)


def _normal_logpdf(x, mean, var):
    return -0.5 * (_LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


@dataclass(frozen=True)
class GmmSpec:
    weights: tuple
    means: tuple
    variances: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        v = np.asarray(self.variances, dtype=np.float64)
        if not (w.shape == m.shape == v.shape) or w.ndim != 1 or w.size == 0:
            raise ValueError("weights, means and variances must be equal-length 1-D sequences")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights must be non-negative and sum to 1, got {w.sum()!r}")
        if np.any(v <= 0):
            raise ValueError("component variances must be positive")
        object.__setattr__(self, "weights", tuple(float(a) for a in w))
        object.__setattr__(self, "means", tuple(float(a) for a in m))
        object.__setattr__(self, "variances", tuple(float(a) for a in v))

    @classmethod
    def symmetric_bimodal(cls, mu, sigma):
        """0.5 N(-mu, sigma^2) + 0.5 N(mu, sigma^2)."""
        return cls((0.5, 0.5), (-mu, mu), (sigma**2, sigma**2))

    @classmethod
    def gaussian(cls, mean, variance):
        return cls((1.0,), (mean,), (variance,))

    @property
    def w(self):
        return np.asarray(self.weights)

    @property
    def log_w(self):
        with np.errstate(divide="ignore"):  # zero-weight components give -inf
            return np.log(self.w)

    @property
    def m(self):
        return np.asarray(self.means)

    @property
    def v(self):
        return np.asarray(self.variances)

    def support(self, width=10.0):
        """Interval holding all mass up to ``width`` standard deviations."""
        sd = np.sqrt(self.v)
        return float(np.min(self.m - width * sd)), float(np.max(self.m + width * sd))

    def _component_logpdf(self, x):
        x = np.asarray(x, dtype=np.float64)[..., None]
        return self.log_w + _normal_logpdf(x, self.m, self.v)

    def log_density(self, x):
        return logsumexp(self._component_logpdf(x), axis=-1)

    def density(self, x):
        return np.exp(self.log_density(x))

    def responsibilities(self, x):
        lp = self._component_logpdf(x)
        return np.exp(lp - logsumexp(lp, axis=-1, keepdims=True))

    def score(self, x):
        x = np.asarray(x, dtype=np.float64)
        r = self.responsibilities(x)
        return np.sum(r * (self.m - x[..., None]) / self.v, axis=-1)

    def score_derivative(self, x):
        x = np.asarray(x, dtype=np.float64)
        r = self.responsibilities(x)
        si = (self.m - x[..., None]) / self.v
        s = np.sum(r * si, axis=-1)
        return np.sum(r * si * si, axis=-1) - s * s - np.sum(r / self.v, axis=-1)

    def cdf(self, x):
        x = np.asarray(x, dtype=np.float64)[..., None]
        return np.sum(self.w * ndtr((x - self.m) / np.sqrt(self.v)), axis=-1)

    def sample(self, n, rng):
        comp = rng.choice(len(self.weights), size=n, p=self.w)
        return self.m[comp] + np.sqrt(self.v[comp]) * rng.standard_normal(n)


@dataclass(frozen=True)
class VpSchedule:
    """Variance-preserving process with ``alpha_bar(t) = exp(-gamma t)``."""

    gamma: float = 20.0
    t_max: float = 0.25

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.t_max <= 0:
            raise ValueError("t_max must be positive")

    def alpha_bar(self, t):
        return np.exp(-self.gamma * np.asarray(t, dtype=np.float64))

    def alpha(self, t):
        """Signal scale sqrt(alpha_bar)."""
        return np.exp(-0.5 * self.gamma * np.asarray(t, dtype=np.float64))

    def sigma(self, t):
        """Noise scale sqrt(1 - alpha_bar)."""
        return np.sqrt(-np.expm1(-self.gamma * np.asarray(t, dtype=np.float64)))

    def net_time(self, t):
        """Time input fed to score networks: gamma t = -log alpha_bar, order one over the horizon."""
        return self.gamma * np.asarray(t, dtype=np.float64)

    def mode_mean(self, mu, t):
        return np.sqrt(self.alpha_bar(t)) * mu

    def mode_variance(self, sigma, t):
        return 1.0 - self.alpha_bar(t) * (1.0 - sigma**2)


@dataclass(frozen=True)
class RewardSpec:
    """Reward descriptor.

    ``kind`` is ``"hard"`` (indicator of x > 0), ``"smooth"``
    (``sigmoid(beta x)``) or ``"constant"`` (identically ``shift``).
    ``shift`` is added to the reward; ``flip`` mirrors it (x -> -x).
    """

    kind: str = "smooth"
    beta: float = 20.0
    tau: float = 1.0
    shift: float = 0.0
    flip: bool = False

    def __post_init__(self):
        if self.kind not in ("hard", "smooth", "constant"):
            raise ValueError(f"unknown reward kind {self.kind!r}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.kind == "smooth" and self.beta <= 0:
            raise ValueError("beta must be positive")

    def replace(self, **changes):
        fields = dict(kind=self.kind, beta=self.beta, tau=self.tau, shift=self.shift, flip=self.flip)
        fields.update(changes)
        return RewardSpec(**fields)

    @property
    def _sign(self):
        return -1.0 if self.flip else 1.0

    @property
    def r_max(self):
        return self.shift + (0.0 if self.kind == "constant" else 1.0)

    @property
    def breakpoints(self):
        if self.kind == "hard":
            return (0.0,)
        if self.kind == "smooth":
            w = 4.0 / self.beta
            return (-w, 0.0, w)
        return ()

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "constant":
            return np.full_like(x, self.shift)
        if self.kind == "hard":
            return (self._sign * x > 0).astype(np.float64) + self.shift
        return expit(self._sign * self.beta * x) + self.shift

    def grad(self, x):
        """dr/dx; zero everywhere for the hard indicator (undefined at 0)."""
        x = np.asarray(x, dtype=np.float64)
        if self.kind != "smooth":
            return np.zeros_like(x)
        s = expit(self._sign * self.beta * x)
        return self._sign * self.beta * s * (1.0 - s)

    def scaled_tilt(self, x):
        """exp((r(x) - r_max) / tau), in (0, 1]."""
        return np.exp((self(x) - self.r_max) / self.tau)

    def gaussian_tilt(self, mean, std):
        """(E, dE/dmean) of exp((r - r_max)/tau) under N(mean, std^2)."""
        mean, std = np.broadcast_arrays(np.asarray(mean, float), np.asarray(std, float))
        if self.kind == "constant":
            return np.ones_like(mean), np.zeros_like(mean)
        if self.kind == "hard":
            z = self._sign * mean / std
            low = np.exp(-1.0 / self.tau)
            p = ndtr(z)
            return low + (1.0 - low) * p, (1.0 - low) * self._sign * _normal_pdf(z) / std
        e = gaussian_expectation(self.scaled_tilt, mean, std, self.breakpoints)
        de = gaussian_expectation(lambda x: self.scaled_tilt(x) * self.grad(x) / self.tau, mean, std, self.breakpoints)
        return e, de

    def gaussian_reward(self, mean, std):
        """(E, dE/dmean) of r under N(mean, std^2)."""
        mean, std = np.broadcast_arrays(np.asarray(mean, float), np.asarray(std, float))
        if self.kind == "constant":
            return np.full_like(mean, self.shift), np.zeros_like(mean)
        if self.kind == "hard":
            z = self._sign * mean / std
            return ndtr(z) + self.shift, self._sign * _normal_pdf(z) / std
        e = gaussian_expectation(self, mean, std, self.breakpoints)
        de = gaussian_expectation(self.grad, mean, std, self.breakpoints)
        return e, de


def gaussian_expectation(fn, mean, std, breakpoints=(), width=12.0):
    """E[fn(X)], X ~ N(mean, std^2), by piecewise Gauss-Legendre.

    The range ``mean +- width*std`` is split at ``breakpoints`` (clipped into
    the range, so empty pieces contribute nothing).  Vectorised over
    ``mean``/``std``.
    """
    mean, std = np.broadcast_arrays(np.asarray(mean, float), np.asarray(std, float))
    lo = mean - width * std
    hi = mean + width * std
    edges = [lo] + [np.clip(b, lo, hi) for b in sorted(breakpoints)] + [hi]
    total = np.zeros_like(mean)
    for a, b in zip(edges[:-1], edges[1:]):
        half = 0.5 * (b - a)
        x = (0.5 * (a + b))[..., None] + half[..., None] * _GL_NODES
        dens = _normal_pdf((x - mean[..., None]) / std[..., None]) / std[..., None]
        total = total + half * np.sum(_GL_WEIGHTS * fn(x) * dens, axis=-1)
    return total


def quad(fn, lo, hi, points=(), epsabs=1e-10, epsrel=1e-10):
    """Adaptive Gauss-Kronrod integral of a scalar function (QUADPACK)."""
    inner = sorted(p for p in points if lo < p < hi)
    value, _ = integrate.quad(fn, lo, hi, points=inner or None, epsabs=epsabs, epsrel=epsrel, limit=500)
    if not np.isfinite(value):
        raise QuadratureError("non-finite integral", interval=(lo, hi))
    return value


def vp_marginal(gmm, schedule, t):
    """Forward marginal q_t: means scaled by sqrt(alpha_bar), variances abar*v + 1 - abar."""
    t = float(t)
    if not 0.0 <= t <= schedule.t_max:
        raise ValueError(f"t={t} outside [0, {schedule.t_max}]")
    return _vp_marginal(gmm, schedule, t)


def _vp_marginal(gmm, schedule, t):
    if t == 0.0:
        return gmm
    ab = float(schedule.alpha_bar(t))
    return GmmSpec(gmm.weights, tuple(np.sqrt(ab) * gmm.m), tuple(ab * gmm.v + (1.0 - ab)))


@dataclass
class PosteriorMixture:
    """q(x0 | xt) for a batch of ``xt`` values: one Gaussian per component.

    Arrays have shape ``xt.shape + (n_components,)``.  ``d_log_evidence`` is
    d/dxt of each component's log marginal likelihood, ``d_means`` the
    derivative of each posterior mean with respect to ``xt``.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    d_log_evidence: np.ndarray
    d_means: np.ndarray

    @property
    def d_weights(self):
        avg = np.sum(self.weights * self.d_log_evidence, axis=-1, keepdims=True)
        return self.weights * (self.d_log_evidence - avg)

    def cdf(self, x0):
        x0 = np.asarray(x0, float)[..., None]
        return np.sum(self.weights * ndtr((x0 - self.means) / np.sqrt(self.variances)), axis=-1)

    def density(self, x0):
        x0 = np.asarray(x0, float)[..., None]
        sd = np.sqrt(self.variances)
        return np.sum(self.weights * _normal_pdf((x0 - self.means) / sd) / sd, axis=-1)

    def mean(self):
        return np.sum(self.weights * self.means, axis=-1)


def posterior_mixture(gmm, schedule, t, x_t):
    """Exact posterior of x0 given x_t under the VP kernel, t > 0 (scalar or per-sample)."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("posterior at t=0 is a Dirac at x_t; pass t > 0")
    x = np.asarray(x_t, dtype=np.float64)
    a = schedule.alpha(t)[..., None]
    s2 = (-np.expm1(-schedule.gamma * t))[..., None]
    xe = x[..., None]
    evid_var = a * a * gmm.v + s2
    log_ev = gmm.log_w + _normal_logpdf(xe, a * gmm.m, evid_var)
    w = np.exp(log_ev - logsumexp(log_ev, axis=-1, keepdims=True))
    gain = a * gmm.v / evid_var
    means = gmm.m + gain * (xe - a * gmm.m)
    variances = np.broadcast_to(gmm.v * s2 / evid_var, w.shape)
    d_log_ev = -(xe - a * gmm.m) / evid_var
    return PosteriorMixture(w, means, variances, d_log_ev, np.broadcast_to(gain, w.shape))


def posterior_sample(gmm, schedule, t, x_t, u):
    """Reparameterised posterior draw by inverse CDF.

    Returns ``(x0, dx0/dxt)`` where ``x0 = F^{-1}(u | xt)`` and the derivative
    comes from implicit differentiation of ``F(x0 | xt) = u``.
    """
    post = posterior_mixture(gmm, schedule, t, x_t)
    u = np.asarray(u, dtype=np.float64)
    sd = np.sqrt(post.variances)
    lo = np.min(post.means - 12.0 * sd, axis=-1)
    hi = np.max(post.means + 12.0 * sd, axis=-1)
    lo, hi = np.broadcast_arrays(lo, hi)
    lo, hi = lo.copy(), hi.copy()
    for _ in range(44):
        mid = 0.5 * (lo + hi)
        below = post.cdf(mid) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    x0 = 0.5 * (lo + hi)
    for _ in range(3):
        dens = post.density(x0)
        x0 = np.clip(x0 - np.where(dens > 0, (post.cdf(x0) - u) / np.maximum(dens, 1e-300), 0.0), lo, hi)
    z = (x0[..., None] - post.means) / sd
    d_cdf = np.sum(post.d_weights * ndtr(z) - post.weights * _normal_pdf(z) * post.d_means / sd, axis=-1)
    return x0, -d_cdf / post.density(x0)


def vp_score(gmm, schedule, t, x_t, with_derivative=False):
    """Score of q_t at per-sample times ``t`` (broadcast against ``x_t``)."""
    t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x_t, float))
    ab = schedule.alpha_bar(t)[..., None]
    var = ab * gmm.v + (1.0 - ab)
    xe = x[..., None]
    si = (np.sqrt(ab) * gmm.m - xe) / var
    lp = gmm.log_w + _normal_logpdf(xe, np.sqrt(ab) * gmm.m, var)
    r = np.exp(lp - logsumexp(lp, axis=-1, keepdims=True))
    s = np.sum(r * si, axis=-1)
    if not with_derivative:
        return s
    return s, np.sum(r * si * si, axis=-1) - s * s - np.sum(r / var, axis=-1)


def tilted_log_partition(gmm, reward, method="auto"):
    """log Z = log E_q0[exp(r/tau)]."""
    if method == "auto":
        method = "closed" if reward.kind != "smooth" else "quad"
    if method == "closed":
        e, _ = reward.gaussian_tilt(gmm.m, np.sqrt(gmm.v))
        scaled = float(np.sum(gmm.w * e))
    elif method == "quad":
        lo, hi = gmm.support()
        scaled = quad(lambda x: gmm.density(x) * reward.scaled_tilt(x), lo, hi, reward.breakpoints)
    else:
        raise ValueError(f"unknown method {method!r}")
    return reward.r_max / reward.tau + np.log(scaled)


def tilted_partition(gmm, reward, method="auto"):
    return float(np.exp(tilted_log_partition(gmm, reward, method)))


def tilted_density(gmm, reward, x0, log_z=None):
    """q*(x0) = q0(x0) exp(r(x0)/tau) / Z."""
    if log_z is None:
        log_z = tilted_log_partition(gmm, reward)
    x0 = np.asarray(x0, dtype=np.float64)
    return np.exp(gmm.log_density(x0) + reward(x0) / reward.tau - log_z)


def tilted_positive_mass(gmm, reward, log_z=None):
    """P_{q*}(x0 > 0)."""
    if log_z is None:
        log_z = tilted_log_partition(gmm, reward)
    if reward.kind != "smooth":
        # the reward is constant on x0 > 0 for both non-smooth kinds
        value_on_positive = reward.shift + float(reward.kind == "hard" and not reward.flip)
        mass = np.sum(gmm.w * ndtr(gmm.m / np.sqrt(gmm.v)))
        return float(mass * np.exp(value_on_positive / reward.tau - log_z))
    _, hi = gmm.support()
    return quad(lambda x: tilted_density(gmm, reward, x, log_z), 0.0, hi, reward.breakpoints)


def tilted_marginal(gmm, reward, schedule, t, x_t, method="auto"):
    """q_t*(x_t): the forward-noised reward-tilted target.

    ``method="posterior"`` uses ``q_t(x_t) E[exp(r/tau) | x_t] / Z`` with
    closed-form posterior expectations (exact Phi formulas for the hard
    reward).  ``method="quad"`` integrates the kernel against ``q*`` directly.
    """
    t = float(t)
    if not 0.0 < t <= schedule.t_max:
        raise ValueError(f"t={t} outside (0, {schedule.t_max}]")
    if method == "auto":
        method = "posterior" if reward.kind != "smooth" else "quad"
    log_z = tilted_log_partition(gmm, reward)
    x_t = np.asarray(x_t, dtype=np.float64)
    if method == "posterior":
        return np.exp(log_tilted_marginal(gmm, reward, schedule, t, x_t, log_z))
    if method != "quad":
        raise ValueError(f"unknown method {method!r}")
    a = float(schedule.alpha(t))
    s2 = float(-np.expm1(-schedule.gamma * t))
    lo, hi = gmm.support()

    def one(x):
        kern = lambda x0: np.exp(_normal_logpdf(x, a * x0, s2)) * tilted_density(gmm, reward, x0, log_z)
        return quad(kern, lo, hi, tuple(reward.breakpoints) + (x / a,), epsabs=1e-13, epsrel=1e-12)

    return np.vectorize(one)(x_t)


def log_tilted_marginal(gmm, reward, schedule, t, x_t, log_z=None):
    """log q_t*(x_t) via the posterior route, for any t > 0 (no horizon check)."""
    if log_z is None:
        log_z = tilted_log_partition(gmm, reward)
    t = float(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    post = posterior_mixture(gmm, schedule, t, x_t)
    e, _ = reward.gaussian_tilt(post.means, np.sqrt(post.variances))
    scaled = np.sum(post.weights * e, axis=-1)
    marg = _vp_marginal(gmm, schedule, t)
    return marg.log_density(x_t) + np.log(scaled) + reward.r_max / reward.tau - log_z


def analytic_drs(gmm, reward, schedule, t, x_t):
    """Diffused reward score d/dxt log E_{q(x0|xt)}[exp(r(x0)/tau)].

    Differentiates the posterior parameters analytically; the only numerical
    integration is the per-component Gaussian expectation of the tilt
    (closed form for hard and constant rewards).
    """
    post = posterior_mixture(gmm, schedule, t, x_t)
    e, de = reward.gaussian_tilt(post.means, np.sqrt(post.variances))
    num = np.sum(post.d_weights * e + post.weights * post.d_means * de, axis=-1)
    den = np.sum(post.weights * e, axis=-1)
    return num / den


def tilted_score(gmm, reward, schedule, t, x_t):
    """Score of q_t*: reference marginal score plus the diffused reward score."""
    return _vp_marginal(gmm, schedule, float(t)).score(x_t) + analytic_drs(gmm, reward, schedule, t, x_t)


def flow_marginal(gmm, t):
    """Marginal of x_t = (1-t) x0 + t eps."""
    t = float(t)
    return GmmSpec(gmm.weights, tuple((1.0 - t) * gmm.m), tuple((1.0 - t) ** 2 * gmm.v + t * t))


def analytic_velocity(gmm, t, x_t, with_derivative=False):
    """E[eps - x0 | x_t] under the linear-interpolation path, t in (0, 1)."""
    t = np.asarray(t, dtype=np.float64)
    if np.any((t <= 0) | (t >= 1)):
        raise ValueError("velocity is defined for t strictly inside (0, 1)")
    x = np.asarray(x_t, dtype=np.float64)[..., None]
    te = t[..., None]
    var = (1.0 - te) ** 2 * gmm.v + te * te
    centred = x - (1.0 - te) * gmm.m
    log_ev = gmm.log_w + _normal_logpdf(x, (1.0 - te) * gmm.m, var)
    w = np.exp(log_ev - logsumexp(log_ev, axis=-1, keepdims=True))
    gain = (te - (1.0 - te) * gmm.v) / var
    comp = -gmm.m + gain * centred
    v = np.sum(w * comp, axis=-1)
    if not with_derivative:
        return v
    dlog = -centred / var
    dw = w * (dlog - np.sum(w * dlog, axis=-1, keepdims=True))
    return v, np.sum(dw * comp + w * gain, axis=-1)
