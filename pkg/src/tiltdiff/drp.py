"""Monte-Carlo estimator of the diffused reward score.

For each noisy input ``x_t`` the estimator runs ``K`` independent
differentiable chains to clean proposals ``x0_k``, differentiates
``r(x0_k)`` back to ``x_t`` and combines the per-chain gradients with
softmax weights over ``r(x0_k) / tau``::

    estimate = (1 / tau) * sum_k w_k * d r(x0_k) / d x_t

Chains are reduced in chain-index order so results are bitwise
reproducible for a fixed generator state.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from . import analytic, diffusion
from .autodiff import Tape
from .errors import EstimatorFault

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DrpConfig:
    """``chains`` is K, ``steps`` is S; tau lives on the reward."""

    chains: int = 4
    steps: int = 4
    chain_kind: str = "ddpm-stochastic"
    timestep_rule: str = "uniform-grid"

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("need at least one chain")
        diffusion.ChainSpec(self.chain_kind, self.steps, self.timestep_rule)


@dataclass
class DrpResult:
    """Estimate of shape (batch,) plus per-chain diagnostics of shape (K, batch)."""

    estimate: np.ndarray
    chain_grads: np.ndarray
    chain_rewards: np.ndarray
    weights: np.ndarray
    proposals: np.ndarray


def softmax_weights(logits, axis=0):
    """Numerically stable softmax along ``axis`` (the chain axis by default)."""
    return softmax(np.asarray(logits, dtype=np.float64), axis=axis)


def _chain_gradient(reference, reward, schedule, t, x_t, config, rng, k):
    """All ``k`` chains on a flattened (k * batch,) array: returns (x0, d r(x0) / d x_t).

    Every random draw has the chain axis leading, so chain ``i`` always sees
    slice ``i`` of the same draws.
    """
    kind = config.chain_kind
    batch = x_t.shape[0] // k
    if kind == "exact-posterior":
        gmm = getattr(reference, "gmm", None)
        if gmm is None:
            raise ValueError("exact-posterior chains need a reference with a .gmm mixture")
        u = rng.uniform(size=(k, batch)).reshape(-1)
        x0, dx0 = analytic.posterior_sample(gmm, schedule, t, x_t, u)
        return x0, reward.grad(x0) * dx0
    tape = Tape()
    leaf = tape.leaf(x_t)
    if kind == "euler-flow":
        times = diffusion.flow_times(t, config.steps, config.timestep_rule, rng)
        out = diffusion.euler_flow_chain(reference, leaf, times)
    else:
        eta = 0.0 if kind == "ddim-deterministic" else 1.0
        noise = ()
        if eta:
            draws = rng.standard_normal((k, config.steps - 1, batch))
            noise = draws.transpose(1, 0, 2).reshape(config.steps - 1, k * batch)
        out = diffusion.ddpm_posterior_chain(reference, leaf, t, schedule, config.steps, noise, eta=eta)
    x0 = out.value
    grads = tape.backward(out, seed=reward.grad(x0))
    return x0, grads[leaf]


def drp_estimate(reference, reward, schedule, t, x_t, config, rng):
    """Estimate the diffused reward score at ``(t, x_t)``.

    ``reference`` is a field (see :mod:`tiltdiff.diffusion`): a score field for
    VP chains, a velocity field for ``euler-flow`` and any object carrying a
    ``gmm`` attribute for ``exact-posterior``.  ``t`` and ``x_t`` broadcast to a
    common 1-D batch.  The K chains run as one vectorised batch whose random
    draws carry the chain index on the leading axis, so chain ``i`` sees the
    same noise whatever ``K`` is evaluated around it.  Raises
    :class:`EstimatorFault` naming the first chain with a non-finite output.
    """
    x_t = np.atleast_1d(np.asarray(x_t, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), x_t.shape)
    if np.any(t <= 0):
        raise ValueError("the estimator needs t > 0")
    x_t = np.broadcast_to(x_t, t.shape)
    if x_t.ndim != 1:
        raise ValueError("x_t must be a scalar or a 1-D batch")
    k = config.chains
    shape = (k,) + x_t.shape
    x_rep = np.broadcast_to(x_t, shape).reshape(-1)
    t_rep = np.broadcast_to(t, shape).reshape(-1)
    x0, g = _chain_gradient(reference, reward, schedule, t_rep, x_rep, config, rng, k)
    proposals, chain_grads = x0.reshape(shape), g.reshape(shape)
    bad = ~(np.isfinite(proposals) & np.isfinite(chain_grads))
    if np.any(bad):
        raise EstimatorFault("non-finite chain output", chain=int(np.argmax(bad.any(axis=1))))
    rewards = reward(proposals)
    weights = softmax_weights(rewards / reward.tau, axis=0)
    estimate = np.zeros_like(x_t)
    for i in range(k):
        estimate += weights[i] * chain_grads[i]
    estimate /= reward.tau
    return DrpResult(estimate, chain_grads, rewards, weights, proposals)


def cg_approx(gmm, reward, schedule, t, x_t):
    """First-order tilt approximation ``(1/tau) d/dx_t E[r(x0) | x_t]``.

    Exact expectation under the posterior mixture; used to compare the
    estimator against classifier-guidance style linearisation.
    """
    post = analytic.posterior_mixture(gmm, schedule, t, x_t)
    e, de = reward.gaussian_reward(post.means, np.sqrt(post.variances))
    return np.sum(post.d_weights * e + post.weights * post.d_means * de, axis=-1) / reward.tau
