import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.special import expit
from scipy.stats import norm

from tiltdiff import analytic as A

GMM = A.GmmSpec.symmetric_bimodal(2.0, 0.5)
SCHED = A.VpSchedule(gamma=20.0, t_max=0.25)
HARD = A.RewardSpec(kind="hard", tau=1.0)
SMOOTH = A.RewardSpec(kind="smooth", beta=20.0, tau=1.0)


# mixture basics


def test_gmm_validation():
    with pytest.raises(ValueError):
        A.GmmSpec((0.5, 0.4), (0.0, 1.0), (1.0, 1.0))
    with pytest.raises(ValueError):
        A.GmmSpec((1.0,), (0.0,), (0.0,))
    with pytest.raises(ValueError):
        A.GmmSpec((0.5, 0.5), (0.0,), (1.0, 1.0))


def test_symmetric_constructor():
    assert GMM.weights == (0.5, 0.5)
    assert GMM.means == (-2.0, 2.0)
    assert GMM.variances == (0.25, 0.25)


def test_standard_normal_score():
    g = A.GmmSpec.gaussian(0.0, 1.0)
    x = np.linspace(-3, 3, 7)
    np.testing.assert_allclose(g.score(x), -x)
    np.testing.assert_allclose(g.log_density(x), norm.logpdf(x))


def test_bimodal_score_symmetry_and_fd():
    assert GMM.score(0.0) == 0.0
    h = 1e-6
    fd = (GMM.log_density(1.0 + h) - GMM.log_density(1.0 - h)) / (2 * h)
    np.testing.assert_allclose(GMM.score(1.0), fd, rtol=1e-7)
    fd2 = (GMM.score(1.0 + h) - GMM.score(1.0 - h)) / (2 * h)
    np.testing.assert_allclose(GMM.score_derivative(1.0), fd2, rtol=1e-6)


def test_log_density_far_tail_is_finite():
    assert np.isfinite(GMM.log_density(80.0))
    assert np.isfinite(GMM.score(-80.0))


def test_cdf_and_sampling(rng):
    x = GMM.sample(200_000, rng)
    assert abs(np.mean(x > 0.5) - (1 - GMM.cdf(0.5))) < 4e-3


# forward marginals


def test_vp_marginal_endpoints():
    assert A.vp_marginal(GMM, SCHED, 0.0) == GMM
    with pytest.raises(ValueError):
        A.vp_marginal(GMM, SCHED, 0.3)
    far = A.vp_marginal(GMM, A.VpSchedule(gamma=20.0, t_max=10.0), 10.0)
    np.testing.assert_allclose(far.means, [0.0, 0.0], atol=1e-40)
    np.testing.assert_allclose(far.variances, [1.0, 1.0], atol=1e-15)


def test_vp_marginal_closed_form_and_monte_carlo(rng):
    marg = A.vp_marginal(GMM, SCHED, 0.05)
    np.testing.assert_allclose(marg.means, [-2 * np.exp(-0.5), 2 * np.exp(-0.5)], rtol=1e-14)
    np.testing.assert_allclose(marg.variances, 0.25 * np.exp(-1) + 1 - np.exp(-1), rtol=1e-14)
    n = 1_000_000
    x0 = GMM.sample(n, rng)
    xt = np.exp(-0.5) * x0 + np.sqrt(1 - np.exp(-1)) * rng.standard_normal(n)
    edges = np.linspace(-4, 4, 41)
    hist, _ = np.histogram(xt, edges)
    expected = n * np.diff(marg.cdf(edges))
    assert np.max(np.abs(hist - expected) / np.sqrt(expected + 1)) < 5.0


def test_vp_semigroup():
    long = A.VpSchedule(gamma=20.0, t_max=1.0)
    two_step = A.vp_marginal(A.vp_marginal(GMM, long, 0.03), long, 0.04)
    np.testing.assert_allclose(two_step.means, A.vp_marginal(GMM, long, 0.07).means, rtol=1e-14)
    np.testing.assert_allclose(two_step.variances, A.vp_marginal(GMM, long, 0.07).variances, rtol=1e-14)


def test_mode_helpers():
    np.testing.assert_allclose(SCHED.mode_mean(2.0, 0.05), 2 * np.exp(-0.5))
    np.testing.assert_allclose(SCHED.mode_variance(0.5, 0.05), 1 - np.exp(-1) * 0.75)
    assert SCHED.alpha_bar(0.0) == 1.0


def test_vp_score_matches_marginal_score(rng):
    t = rng.uniform(0.001, 0.25, 50)
    x = rng.normal(0, 2, 50)
    expected = [A.vp_marginal(GMM, SCHED, ti).score(xi) for ti, xi in zip(t, x)]
    np.testing.assert_allclose(A.vp_score(GMM, SCHED, t, x), expected, rtol=1e-12)


# posterior


def test_posterior_weights_sum_to_one(rng):
    post = A.posterior_mixture(GMM, SCHED, rng.uniform(0.01, 0.25, 20), rng.normal(0, 2, 20))
    np.testing.assert_allclose(post.weights.sum(axis=-1), 1.0, rtol=1e-14)


def test_posterior_bayes_identity(rng):
    for _ in range(20):
        t, xt, x0 = rng.uniform(0.005, 0.25), rng.normal(0, 1.5), rng.normal(0, 2.5)
        a, s = np.exp(-10 * t), np.sqrt(-np.expm1(-20 * t))
        lhs = GMM.density(x0) * norm.pdf(xt, a * x0, s)
        rhs = A.vp_marginal(GMM, SCHED, t).density(xt) * A.posterior_mixture(GMM, SCHED, t, xt).density(x0)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10)


def test_posterior_single_gaussian_mean():
    g = A.GmmSpec.gaussian(0.0, 0.3)
    t, xt = 0.07, 0.8
    ab = np.exp(-20 * t)
    post = A.posterior_mixture(g, SCHED, t, xt)
    np.testing.assert_allclose(post.mean(), np.sqrt(ab) * 0.3 * xt / (ab * 0.3 + 1 - ab), rtol=1e-13)


def test_posterior_rejects_zero_time():
    with pytest.raises(ValueError):
        A.posterior_mixture(GMM, SCHED, 0.0, 1.0)


def test_posterior_sample_inverts_cdf(rng):
    t, xt = np.full(64, 0.08), rng.normal(0, 1.5, 64)
    u = rng.uniform(size=64)
    x0, dx0 = A.posterior_sample(GMM, SCHED, t, xt, u)
    np.testing.assert_allclose(A.posterior_mixture(GMM, SCHED, t, xt).cdf(x0), u, atol=1e-12)
    h = 1e-6
    fd = (A.posterior_sample(GMM, SCHED, t, xt + h, u)[0] - A.posterior_sample(GMM, SCHED, t, xt - h, u)[0]) / (2 * h)
    np.testing.assert_allclose(dx0, fd, rtol=1e-5, atol=1e-8)


# tilted target


def test_hard_partition_closed_form():
    tau = 0.7
    r = HARD.replace(tau=tau)
    z = 0.5 * (norm.cdf(-4) + norm.cdf(4) * np.exp(1 / tau)) + 0.5 * (norm.cdf(4) + norm.cdf(-4) * np.exp(1 / tau))
    np.testing.assert_allclose(A.tilted_partition(GMM, r), z, rtol=1e-12)
    np.testing.assert_allclose(A.tilted_log_partition(GMM, r, method="quad"), np.log(z), rtol=1e-10)


def test_constant_reward_leaves_reference():
    r = A.RewardSpec(kind="constant", shift=3.0, tau=0.4)
    x = np.linspace(-4, 4, 9)
    np.testing.assert_allclose(A.tilted_density(GMM, r, x), GMM.density(x), rtol=1e-12)
    np.testing.assert_allclose(A.tilted_marginal(GMM, r, SCHED, 0.1, x), A.vp_marginal(GMM, SCHED, 0.1).density(x), rtol=1e-12)


def test_hard_positive_mass_near_sigmoid():
    for tau in (0.5, 1.0, 2.0):
        np.testing.assert_allclose(A.tilted_positive_mass(GMM, HARD.replace(tau=tau)), expit(1 / tau), atol=1e-4)


def test_smooth_positive_mass_importance_sampling():
    rng = np.random.default_rng(99)
    num = den = 0.0
    for _ in range(10):
        x = GMM.sample(1_000_000, rng)
        w = np.exp(SMOOTH(x))
        num += np.sum(w * (x > 0))
        den += np.sum(w)
    assert abs(num / den - A.tilted_positive_mass(GMM, SMOOTH)) < 1e-3


@pytest.mark.parametrize("reward", [HARD, SMOOTH, HARD.replace(tau=0.3), SMOOTH.replace(flip=True)])
def test_tilted_density_integrates_to_one(reward):
    lo, hi = GMM.support()
    log_z = A.tilted_log_partition(GMM, reward)
    total, _ = integrate.quad(lambda x: A.tilted_density(GMM, reward, x, log_z), lo, hi, points=[0.0], epsabs=1e-12, limit=200)
    assert abs(total - 1.0) < 1e-8


def test_tilted_marginal_two_paths():
    closed = A.tilted_marginal(GMM, HARD, SCHED, 0.05, 0.3, method="posterior")
    quad = A.tilted_marginal(GMM, HARD, SCHED, 0.05, 0.3, method="quad")
    assert abs(closed - quad) / closed < 1e-8


def test_tilted_marginal_smooth_two_paths(rng):
    for t, x in zip(rng.uniform(0.01, 0.25, 5), rng.normal(0, 1.5, 5)):
        np.testing.assert_allclose(
            A.tilted_marginal(GMM, SMOOTH, SCHED, t, x, method="posterior"),
            A.tilted_marginal(GMM, SMOOTH, SCHED, t, x, method="quad"),
            rtol=1e-8,
        )


def test_tilted_marginal_large_tau_approaches_reference():
    x = np.linspace(-3, 3, 7)
    ref = A.vp_marginal(GMM, SCHED, 0.1).density(x)
    gaps = [np.max(np.abs(A.tilted_marginal(GMM, HARD.replace(tau=tau), SCHED, 0.1, x) / ref - 1)) for tau in (1, 10, 100, 1000)]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-3


def test_tilted_marginal_rejects_bad_time():
    with pytest.raises(ValueError):
        A.tilted_marginal(GMM, HARD, SCHED, 0.0, 0.0)
    with pytest.raises(ValueError):
        A.tilted_marginal(GMM, HARD, SCHED, 0.3, 0.0)


# diffused reward score


def hard_drs_oracle(t, xt, tau):
    """Closed form from P(x0 > 0 | xt) and a finite difference of it."""
    def p_pos(x):
        return 1.0 - A.posterior_mixture(GMM, SCHED, t, x).cdf(0.0)

    c = np.exp(1 / tau) - 1
    h = 1e-6
    dp = (p_pos(xt + h) - p_pos(xt - h)) / (2 * h)
    return c * dp / (1 + c * p_pos(xt))


def test_hard_drs_closed_form(rng):
    for t, x in zip(rng.uniform(0.01, 0.25, 10), rng.normal(0, 1.5, 10)):
        np.testing.assert_allclose(A.analytic_drs(GMM, HARD, SCHED, t, x), hard_drs_oracle(t, x, 1.0), rtol=1e-6, atol=1e-9)


def test_drs_sign_and_saturation():
    assert A.analytic_drs(GMM, HARD, SCHED, 0.05, 0.0) > 0
    assert abs(A.analytic_drs(GMM, HARD, SCHED, 0.05, 12.0)) < 1e-12
    assert A.analytic_drs(GMM, HARD.replace(flip=True), SCHED, 0.05, 0.0) < 0


@pytest.mark.parametrize("reward", [HARD, SMOOTH, SMOOTH.replace(tau=0.4)])
def test_decomposition_against_log_marginal_fd(reward, rng):
    h = 1e-5
    for t, x in zip(rng.uniform(0.005, 0.25, 10), rng.normal(0, 1.5, 10)):
        fd = (A.log_tilted_marginal(GMM, reward, SCHED, t, x + h) - A.log_tilted_marginal(GMM, reward, SCHED, t, x - h)) / (2 * h)
        drs = fd - A.vp_marginal(GMM, SCHED, t).score(x)
        assert abs(drs - A.analytic_drs(GMM, reward, SCHED, t, x)) < 1e-6
    np.testing.assert_allclose(A.tilted_score(GMM, reward, SCHED, 0.1, 0.4), A.vp_score(GMM, SCHED, 0.1, 0.4) + A.analytic_drs(GMM, reward, SCHED, 0.1, 0.4))


def test_drs_envelope_decays_with_time():
    x = np.linspace(-3, 3, 121)
    env = [np.max(np.abs(A.analytic_drs(GMM, HARD, SCHED, t, x))) for t in np.linspace(0.05, 0.25, 9)]
    assert all(b < a for a, b in zip(env, env[1:]))
    far = A.VpSchedule(gamma=20.0, t_max=2.0)
    assert np.max(np.abs(A.analytic_drs(GMM, HARD, far, 2.0, x))) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(0.005, 0.25), st.floats(-5, 5), st.sampled_from(["hard", "smooth"]))
def test_reward_shift_invariance(x, t, shift, kind):
    base = A.RewardSpec(kind=kind, tau=0.8)
    moved = base.replace(shift=shift)
    np.testing.assert_allclose(A.tilted_density(GMM, moved, x), A.tilted_density(GMM, base, x), rtol=1e-10)
    np.testing.assert_allclose(A.log_tilted_marginal(GMM, moved, SCHED, t, x), A.log_tilted_marginal(GMM, base, SCHED, t, x), rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(A.analytic_drs(GMM, moved, SCHED, t, x), A.analytic_drs(GMM, base, SCHED, t, x), rtol=1e-10, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(0.005, 0.25))
def test_drs_mirror_symmetry(x, t):
    np.testing.assert_allclose(
        A.analytic_drs(GMM, HARD.replace(flip=True), SCHED, t, -x), -A.analytic_drs(GMM, HARD, SCHED, t, x), rtol=1e-9, atol=1e-12
    )


# rewards


def test_reward_values():
    assert set(np.unique(HARD(np.linspace(-1, 1, 11)))) <= {0.0, 1.0}
    v = SMOOTH(np.linspace(-1, 1, 11))
    assert np.all((v > 0) & (v < 1))
    with pytest.raises(ValueError):
        A.RewardSpec(tau=0.0)
    with pytest.raises(ValueError):
        A.RewardSpec(kind="linear")


def test_gaussian_tilt_against_quad():
    for r in (HARD, SMOOTH):
        e, de = r.gaussian_tilt(0.3, 0.4)
        f = lambda x, m: r.scaled_tilt(x) * norm.pdf(x, m, 0.4)
        q = integrate.quad(lambda x: f(x, 0.3), -6, 6, points=[0.0], epsabs=1e-13)[0]
        h = 1e-5
        dq = (integrate.quad(lambda x: f(x, 0.3 + h), -6, 6, points=[0.0], epsabs=1e-13)[0] - integrate.quad(lambda x: f(x, 0.3 - h), -6, 6, points=[0.0], epsabs=1e-13)[0]) / (2 * h)
        np.testing.assert_allclose(e, q, rtol=1e-9)
        np.testing.assert_allclose(de, dq, rtol=1e-5)


# rectified flow


def test_velocity_single_gaussian_linear():
    g = A.GmmSpec.gaussian(0.0, 1.0)
    t = 0.3
    x = np.linspace(-2, 2, 5)
    # E[eps - x0 | x_t] = (t - (1 - t)) x_t / ((1 - t)^2 + t^2)
    np.testing.assert_allclose(A.analytic_velocity(g, t, x), (2 * t - 1) * x / ((1 - t) ** 2 + t * t), rtol=1e-13)


def test_velocity_symmetry_and_domain():
    assert A.analytic_velocity(GMM, 0.4, 0.0) == 0.0
    with pytest.raises(ValueError):
        A.analytic_velocity(GMM, 1.0, 0.0)
    with pytest.raises(ValueError):
        A.analytic_velocity(GMM, 0.0, 0.0)


def test_velocity_derivative_fd(rng):
    x = rng.normal(0, 1, 10)
    v, dv = A.analytic_velocity(GMM, 0.6, x, with_derivative=True)
    h = 1e-6
    fd = (A.analytic_velocity(GMM, 0.6, x + h) - A.analytic_velocity(GMM, 0.6, x - h)) / (2 * h)
    np.testing.assert_allclose(dv, fd, rtol=1e-6, atol=1e-9)


def test_flow_marginal_moments():
    m = A.flow_marginal(GMM, 0.25)
    np.testing.assert_allclose(m.means, [-1.5, 1.5])
    np.testing.assert_allclose(m.variances, [0.75**2 * 0.25 + 0.0625] * 2)
