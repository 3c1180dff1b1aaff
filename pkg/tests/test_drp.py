import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rel_error
from tiltdiff import analytic as A
from tiltdiff import diffusion as D
from tiltdiff.drp import DrpConfig, cg_approx, drp_estimate, softmax_weights
from tiltdiff.errors import EstimatorFault

GMM = A.GmmSpec.symmetric_bimodal(2.0, 0.5)
SCHED = A.VpSchedule(gamma=20.0, t_max=0.25)
SMOOTH = A.RewardSpec(kind="smooth", beta=20.0, tau=1.0)
SCORE = D.GmmScore(GMM, SCHED)


def test_config_validation():
    with pytest.raises(ValueError):
        DrpConfig(chains=0)
    with pytest.raises(ValueError):
        DrpConfig(steps=0)
    with pytest.raises(ValueError):
        DrpConfig(chain_kind="langevin")


def test_softmax_examples():
    np.testing.assert_allclose(softmax_weights(np.zeros(4)), np.full(4, 0.25))
    np.testing.assert_allclose(softmax_weights(np.array([1.0, 0.0])), [np.e / (np.e + 1), 1 / (np.e + 1)], rtol=1e-15)
    np.testing.assert_allclose(softmax_weights(np.array([0.3, -2.0, 5.0]) / 1e9), np.full(3, 1 / 3), rtol=1e-8)
    w = softmax_weights(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(w)) and w[0] == 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.randoms(use_true_random=False))
def test_softmax_properties(values, rnd):
    logits = np.array(values)
    w = softmax_weights(logits)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(), 1.0, rtol=1e-12)
    perm = list(range(len(values)))
    rnd.shuffle(perm)
    np.testing.assert_allclose(softmax_weights(logits[perm]), w[perm], rtol=1e-12)
    np.testing.assert_allclose(softmax_weights(logits + 3.7), w, rtol=1e-12, atol=1e-300)


def run(config, x, t=0.05, reward=SMOOTH, seed=0, reference=SCORE):
    return drp_estimate(reference, reward, SCHED, t, x, config, np.random.default_rng(seed))


@pytest.mark.parametrize("kind", ["ddpm-stochastic", "ddim-deterministic", "exact-posterior"])
def test_single_chain_is_plain_pathwise_gradient(kind):
    x = np.linspace(-1, 1, 5)
    res = run(DrpConfig(chains=1, chain_kind=kind), x, reward=SMOOTH.replace(tau=0.3))
    np.testing.assert_array_equal(res.weights, 1.0)
    np.testing.assert_allclose(res.estimate, res.chain_grads[0] / 0.3, rtol=1e-15)


def test_chain_gradient_matches_finite_difference():
    cfg = DrpConfig(chains=3, steps=4)
    x = np.array([-0.4, 0.1, 0.9])
    res = run(cfg, x)
    h = 1e-6
    up, down = run(cfg, x + h).proposals, run(cfg, x - h).proposals
    fd = SMOOTH.grad(res.proposals) * (up - down) / (2 * h)
    assert rel_error(res.chain_grads, fd) < 1e-4


@pytest.mark.parametrize("kind", ["ddpm-stochastic", "exact-posterior", "euler-flow"])
def test_reward_shift_leaves_estimate_unchanged(kind):
    reference = D.GmmVelocity(GMM) if kind == "euler-flow" else SCORE
    cfg = DrpConfig(chains=4, chain_kind=kind, timestep_rule="uniform-random-per-chain")
    x = np.linspace(-2, 2, 9)
    t = 0.5 if kind == "euler-flow" else 0.05
    a = run(cfg, x, t=t, reference=reference)
    b = run(cfg, x, t=t, reference=reference, reward=SMOOTH.replace(shift=5.0))
    np.testing.assert_allclose(b.estimate, a.estimate, rtol=1e-12, atol=1e-12)


def test_same_seed_same_result_and_chain_slices():
    cfg = DrpConfig(chains=4)
    x = np.linspace(-1, 1, 6)
    a, b = run(cfg, x, seed=3), run(cfg, x, seed=3)
    np.testing.assert_array_equal(a.estimate, b.estimate)
    c = run(DrpConfig(chains=4), x, seed=4)
    assert not np.array_equal(a.estimate, c.estimate)


def test_weights_follow_endpoint_rewards():
    res = run(DrpConfig(chains=4), np.linspace(-1, 1, 6), reward=SMOOTH.replace(tau=0.5))
    np.testing.assert_allclose(res.weights, softmax_weights(res.chain_rewards / 0.5), rtol=1e-14)
    np.testing.assert_allclose(res.chain_rewards, SMOOTH(res.proposals))


def test_nonfinite_chain_raises_with_index():
    bad = D.FunctionField(lambda x, t: np.where(x > 5, np.nan, -x), lambda x, t: -np.ones_like(x))
    with pytest.raises(EstimatorFault) as info:
        run(DrpConfig(chains=2, steps=2), np.array([0.0, 10.0]), reference=bad)
    assert info.value.chain == 0


def test_rejects_zero_time():
    with pytest.raises(ValueError):
        run(DrpConfig(), np.zeros(2), t=0.0)


def test_exact_posterior_needs_mixture():
    field = D.FunctionField(lambda x, t: -x, lambda x, t: -np.ones_like(x))
    with pytest.raises(ValueError):
        run(DrpConfig(chain_kind="exact-posterior"), np.zeros(1), reference=field)


def test_exact_posterior_consistent_at_moderate_k():
    rng = np.random.default_rng(11)
    for t, x in zip(rng.uniform(0.01, 0.25, 4), rng.normal(0, 1.2, 4)):
        res = run(DrpConfig(chains=20_000, chain_kind="exact-posterior"), np.full(16, x), t=t, seed=int(1e6 * t))
        se = np.std(res.estimate, ddof=1) / 4.0
        assert abs(np.mean(res.estimate) - A.analytic_drs(GMM, SMOOTH, SCHED, t, x)) < 4 * se + 1e-12


def test_low_noise_fidelity_with_exact_score():
    # alpha_bar >= 0.99: the posterior is concentrated and S=4 chains are close to exact
    t = -np.log(0.99) / 20.0
    x = np.random.default_rng(5).normal(0, 0.3, 2000)
    res = run(DrpConfig(chains=4, steps=4), x, t=t)
    exact = A.analytic_drs(GMM, SMOOTH, SCHED, t, x)
    # error of the x_t-average; per-point K=4 noise is not part of the claim
    assert abs(np.mean(res.estimate) - np.mean(exact)) / np.mean(np.abs(exact)) < 0.1


def test_cg_constant_reward_is_zero():
    r = A.RewardSpec(kind="constant", shift=2.0, tau=0.7)
    np.testing.assert_allclose(cg_approx(GMM, r, SCHED, 0.1, np.linspace(-2, 2, 5)), 0.0, atol=1e-14)


def test_cg_gap_shrinks_with_temperature():
    rng = np.random.default_rng(8)
    t, x = rng.uniform(0.01, 0.25, 20), rng.normal(0, 1.2, 20)
    def gaps(tau):
        r = A.RewardSpec(kind="hard", tau=tau)
        exact = A.analytic_drs(GMM, r, SCHED, t, x)
        return np.abs(cg_approx(GMM, r, SCHED, t, x) - exact) / np.abs(exact)

    weak, strong = gaps(100.0), gaps(0.5)
    assert np.max(weak) < 0.02
    assert np.all(weak < strong)


def test_cg_matches_drs_derivative_in_weak_tilt():
    # d/d(1/tau) of tau * DRS at 1/tau -> 0 equals the first-order term
    r = A.RewardSpec(kind="smooth", tau=1e6)
    x = np.array([-0.5, 0.2, 1.1])
    np.testing.assert_allclose(cg_approx(GMM, r, SCHED, 0.08, x), A.analytic_drs(GMM, r, SCHED, 0.08, x), rtol=1e-5)
