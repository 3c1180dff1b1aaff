"""Four-stage toy pipeline: reference DSM, one-step distillation, TA tracking, alignment.

Alignment alternates ``ta_updates`` DSM steps for the teaching-assistant
network on generator samples with one generator step.  The two methods share
every line except :func:`_mismatch`, which builds the per-sample coefficient
contracted with ``dx_t/dtheta``:

* ``didr``: ``w(t) (s_ta - s_ref - s_r)`` with ``s_r`` from the reward-score
  estimator on the frozen reference;
* ``dipp``: ``tau w(t) (s_ta - s_ref)`` plus direct reward backpropagation at
  the clean endpoint.

Both are multiplied by the sampled horizon length, so the Monte-Carlo average
over ``t ~ U[t_floor, T]`` estimates the time integral rather than its mean.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffusion, theory
from .analytic import GmmSpec, RewardSpec, VpSchedule
from .autodiff import Tape
from .drp import DrpConfig, drp_estimate
from .errors import TrainingFault
from .nets import MlpNet
from .optim import AdamState, adam_step
from .rng import stream

log = logging.getLogger(__name__)

METHODS = ("didr", "dipp")
METRIC_COLUMNS = ("outer_step", "method", "tau", "p_positive", "mean_reward", "ta_dsm_loss", "kl_to_qstar")


def _uniform_weight(t, schedule):
    return np.ones_like(t)


def _noise_variance_weight(t, schedule):
    return schedule.sigma(t) ** 2


TIME_WEIGHTS = {"uniform": _uniform_weight, "noise-variance": _noise_variance_weight}


@dataclass
class PipelineConfig:
    mu: float = 2.0
    sigma: float = 0.5
    gamma: float = 20.0
    t_max: float = 0.25
    t_floor: float = 1e-4
    hidden_width: int = 128
    depth: int = 3
    ref_steps: int = 10_000
    ref_lr: float = 3e-4
    ref_batch: int = 2048
    distill_steps: int = 3000
    distill_lr: float = 1e-3
    distill_batch: int = 2048
    ddim_steps: int = 30
    ddim_spacing: str = "quadratic"
    distill_pool: int = 65_536
    outer_steps: int = 6000
    ta_updates: int = 5
    ta_lr: float = 3e-4
    ta_batch: int = 2048
    gen_lr: float = 1e-4
    gen_batch: int = 2048
    method: str = "didr"
    time_weight: str = "uniform"
    dsm_weight: str = "uniform"
    drp: DrpConfig = field(default_factory=DrpConfig)
    reward: RewardSpec = field(default_factory=RewardSpec)
    log_interval: int = 100
    log_samples: int = 4096
    eval_samples: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.time_weight not in TIME_WEIGHTS:
            raise ValueError(f"unknown time weight {self.time_weight!r}")
        if self.ddim_spacing not in diffusion.DDIM_SPACINGS:
            raise ValueError(f"unknown DDIM spacing {self.ddim_spacing!r}")
        if self.dsm_weight not in TIME_WEIGHTS:
            raise ValueError(f"unknown DSM weight {self.dsm_weight!r}")
        if not 0.0 < self.t_floor < self.t_max:
            raise ValueError("need 0 < t_floor < t_max")
        for name in ("ref_batch", "distill_batch", "ta_batch", "gen_batch", "eval_samples", "log_interval", "ddim_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("ref_steps", "distill_steps", "outer_steps", "ta_updates"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def gmm(self):
        return GmmSpec.symmetric_bimodal(self.mu, self.sigma)

    @property
    def schedule(self):
        return VpSchedule(gamma=self.gamma, t_max=self.t_max)

    @property
    def horizon(self):
        return self.t_max - self.t_floor

    def with_method(self, method):
        return replace(self, method=method)


def _draw_times(rng, n, config):
    return diffusion.sample_times(rng, n, config.t_floor, config.t_max)


def _dsm_step(net, opt, x0, rng, config, lr_stage, step):
    n = x0.shape[0]
    t = _draw_times(rng, n, config)
    noise = rng.standard_normal(n)
    weight = TIME_WEIGHTS[config.dsm_weight](t, config.schedule)
    loss, grads = diffusion.dsm_loss(net, x0, t, noise, config.schedule, weight=weight, step=step, stage=lr_stage)
    adam_step(opt, net.params(), grads, stage=lr_stage)
    return loss


def init_score_net(config, stage="init", index=0):
    return MlpNet.init(2, config.hidden_width, config.depth, head="eps", rng=stream(config.seed, stage, 0, index))


def init_generator(config):
    return MlpNet.init(1, config.hidden_width, config.depth, head="direct", rng=stream(config.seed, "init", 0, 1))


def train_reference(gmm, config, net=None):
    """DSM on samples from ``gmm``; returns ``(net, loss_curve)`` with the net frozen."""
    net = init_score_net(config) if net is None else net
    opt = AdamState.for_params(net.params(), config.ref_lr)
    losses = np.empty(config.ref_steps)
    for step in range(config.ref_steps):
        rng = stream(config.seed, "reference", step)
        x0 = gmm.sample(config.ref_batch, rng)
        losses[step] = _dsm_step(net, opt, x0, rng, config, "reference", step + 1)
    net.trainable = False
    return net, losses


def ddim_targets(reference, z, config):
    """30-step (by default) deterministic DDIM endpoints started at x_T = z."""
    field_ = diffusion.NetScore(reference, config.schedule)
    return diffusion.ddim_chain(field_, z, config.t_max, config.ddim_steps, config.schedule, config.ddim_spacing)


def distill_generator(reference, config, generator=None, target_fn=None):
    """Regress ``g(z)`` onto deterministic-sampler endpoints for the same ``z``.

    Targets are precomputed for a fixed pool of ``distill_pool`` latent draws
    and minibatches are drawn from that pool.  ``target_fn(z)`` overrides the
    sampler (used for degenerate checks).  Returns ``(generator, loss_curve)``.
    """
    generator = init_generator(config) if generator is None else generator
    pool_rng = stream(config.seed, "distill", 0, 1)
    z_pool = pool_rng.standard_normal(config.distill_pool)
    target_pool = ddim_targets(reference, z_pool, config) if target_fn is None else target_fn(z_pool)
    opt = AdamState.for_params(generator.params(), config.distill_lr)
    losses = np.empty(config.distill_steps)
    for step in range(config.distill_steps):
        rng = stream(config.seed, "distill", step + 1)
        idx = rng.integers(0, config.distill_pool, size=config.distill_batch)
        z, target = z_pool[idx], target_pool[idx]
        tape = Tape()
        out, params = generator.forward(tape, tape.const(z), track_params=True)
        loss = tape.mean(tape.square(tape.shift(out, -target)))
        losses[step] = float(loss.value)
        if not np.isfinite(losses[step]):
            raise TrainingFault("non-finite distillation loss", stage="distill", step=step + 1)
        grads = tape.backward(loss)
        adam_step(opt, generator.params(), [grads[p] for p in params], stage="distill")
    return generator, losses


def generate(generator, z):
    return generator(np.asarray(z, dtype=np.float64))


def ta_update(ta, generator, opt, config, step, index=0):
    """One DSM step of the teaching assistant on fresh generator samples."""
    rng = stream(config.seed, "ta", step, index)
    z = rng.standard_normal(config.ta_batch)
    return _dsm_step(ta, opt, generate(generator, z), rng, config, "ta", step)


def _mismatch(method, s_ta, s_ref, x_t, t, reference, config, step):
    """The only method-specific piece: coefficient on dx_t/dtheta and the endpoint-reward weight."""
    weight = TIME_WEIGHTS[config.time_weight](t, config.schedule) * config.horizon
    if method == "didr":
        s_r = drp_estimate(
            diffusion.NetScore(reference, config.schedule),
            config.reward,
            config.schedule,
            t,
            x_t,
            config.drp,
            stream(config.seed, "drp", step),
        ).estimate
        return weight * (s_ta - s_ref - s_r), 0.0
    if method == "dipp":
        return config.reward.tau * weight * (s_ta - s_ref), 1.0
    raise ValueError(f"unknown method {method!r}")


def generator_gradients(generator, ta, reference, config, step, method=None):
    """Parameter gradients of the generator surrogate for one batch.

    The surrogate is ``mean(c * x_t) - k * mean(r(g(z)))`` with the
    coefficient ``c`` detached, so its gradient is the score-mismatch
    contraction minus ``k`` times the endpoint reward gradient.
    """
    method = config.method if method is None else method
    rng = stream(config.seed, "generator", step)
    n = config.gen_batch
    z = rng.standard_normal(n)
    t = _draw_times(rng, n, config)
    noise = rng.standard_normal(n)
    tape = Tape()
    x0, params = generator.forward(tape, tape.const(z), track_params=True)
    x_t = diffusion.forward_sample(x0, config.schedule, t, noise)
    s_ta = diffusion.NetScore(ta, config.schedule)(x_t.value, t)
    s_ref = diffusion.NetScore(reference, config.schedule)(x_t.value, t)
    coeff, reward_weight = _mismatch(method, s_ta, s_ref, x_t.value, t, reference, config, step)
    surrogate = tape.mean(tape.scale(x_t, coeff))
    if reward_weight:
        r = config.reward
        reward_node = tape.elementwise(x0, r(x0.value), r.grad(x0.value))
        surrogate = tape.sub(surrogate, tape.scale(tape.mean(reward_node), reward_weight))
    if not np.isfinite(surrogate.value):
        raise TrainingFault("non-finite generator surrogate", stage="generator", step=step)
    grads = tape.backward(surrogate)
    return [grads[p] for p in params]


def generator_update(generator, ta, reference, opt, config, step, method=None):
    grads = generator_gradients(generator, ta, reference, config, step, method)
    adam_step(opt, generator.params(), grads, stage="generator")


def generator_update_didr(generator, ta, reference, opt, config, step):
    generator_update(generator, ta, reference, opt, config, step, method="didr")


def generator_update_dipp(generator, ta, reference, opt, config, step):
    generator_update(generator, ta, reference, opt, config, step, method="dipp")


@dataclass
class Metrics:
    outer_step: int
    method: str
    tau: float
    p_positive: float
    mean_reward: float
    ta_dsm_loss: float
    kl_to_qstar: float

    def row(self):
        return [getattr(self, c) for c in METRIC_COLUMNS]


def evaluate_generator(generator, config, n, step=0, ta_loss=float("nan")):
    """P(x > 0) with the hard boundary, mean training reward and histogram KL to q*."""
    z = stream(config.seed, "eval", step).standard_normal(n)
    x = generate(generator, z)
    eval_reward = config.reward.replace(kind="hard")
    return Metrics(
        outer_step=step,
        method=config.method,
        tau=config.reward.tau,
        p_positive=theory.positive_mass(x),
        mean_reward=float(np.mean(config.reward(x))),
        ta_dsm_loss=float(ta_loss),
        kl_to_qstar=theory.kl_to_tilted(x, config.gmm, eval_reward),
    )


@dataclass
class AlignmentResult:
    generator: MlpNet
    ta: MlpNet
    history: list
    final: Metrics


def run_alignment(config, reference, generator, ta=None, callback=None):
    """Alternate TA tracking and generator updates for ``outer_steps`` steps.

    ``reference`` and ``generator`` are not modified; working copies are
    trained.  Metrics are logged every ``log_interval`` steps (and at step 0)
    on ``log_samples`` draws; the final evaluation uses ``eval_samples``.
    """
    ref_digest = reference.digest()
    generator = generator.copy()
    generator.trainable = True
    ta = reference.copy() if ta is None else ta.copy()
    ta.trainable = True
    ta_opt = AdamState.for_params(ta.params(), config.ta_lr)
    gen_opt = AdamState.for_params(generator.params(), config.gen_lr)
    history = [evaluate_generator(generator, config, config.log_samples, 0)]
    if callback:
        callback(history[-1])
    for step in range(1, config.outer_steps + 1):
        ta_losses = [ta_update(ta, generator, ta_opt, config, step, k) for k in range(config.ta_updates)]
        generator_update(generator, ta, reference, gen_opt, config, step)
        if step % config.log_interval == 0:
            loss = float(np.mean(ta_losses)) if ta_losses else float("nan")
            history.append(evaluate_generator(generator, config, config.log_samples, step, loss))
            if callback:
                callback(history[-1])
    if reference.digest() != ref_digest:
        raise RuntimeError("reference parameters changed during alignment")
    last_loss = history[-1].ta_dsm_loss if config.outer_steps else float("nan")
    final = evaluate_generator(generator, config, config.eval_samples, config.outer_steps, last_loss)
    return AlignmentResult(generator, ta, history, final)
