"""Experiment runners behind the command line.

Each runner writes headered CSV files into the output directory and returns a
dict of results for the JSON summary.  Floats are written with ``repr`` so
identical runs give byte-identical files.
"""

import csv
import logging
import os
from dataclasses import astuple

import numpy as np

from . import analytic, diffusion, theory, training
from .drp import cg_approx, drp_estimate
from .errors import ConfigError
from .nets import MlpNet
from .rng import stream

log = logging.getLogger(__name__)


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return value


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


class Context:
    """Output directory, figure switch and the resolved config."""

    def __init__(self, config, figures=True):
        self.config = config
        self.figures = figures and config["experiment.figures"]
        self.out = config["experiment.out"]
        os.makedirs(self.out, exist_ok=True)
        self.files = []

    def path(self, name):
        return os.path.join(self.out, name)

    def csv(self, name, columns, rows):
        self.files.append(write_csv(self.path(name), columns, rows))

    def figure(self, fn, name, *args):
        if not self.figures:
            return
        from . import plotting

        self.files.append(getattr(plotting, fn)(*args, self.path(name)))

    def checkpoint_dir(self):
        path = self.path("checkpoints")
        os.makedirs(path, exist_ok=True)
        return path

    def family(self):
        p = self.config.values["problem"]
        return theory.AlphaFamily.symmetric(p["mu"], p["sigma"], p["gamma"])


def _load_net(explicit, fallback, what):
    path = explicit or fallback
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} checkpoint not found at {path}; run the earlier stage or set its checkpoint path")
    net = MlpNet.load(path)
    return net


# theory


def run_threshold_scan(ctx):
    fam = ctx.family()
    th = ctx.config.values["theory"]
    rows = theory.threshold_scan(fam, reward=analytic.RewardSpec(kind="hard"), points=th["scan_points"], span=(th["scan_low"], th["scan_high"]))
    ctx.csv("threshold_scan.csv", theory.SCAN_COLUMNS, [astuple(r) for r in rows])
    ctx.figure("threshold_scan_figure", "threshold_scan.png", rows)
    result = {
        "tau_crit_closed": rows[0].tau_crit_closed,
        "b_crit_quadrature": theory.b_crit_quadrature(fam.mu, fam.sigma, fam.gamma),
        "bracket": [rows[0].tau_crit_bracket_lo, rows[0].tau_crit_bracket_hi],
    }
    lo, hi = result["bracket"]
    if np.isfinite(lo) and np.isfinite(hi):
        result["tau_transition"] = theory.refine_transition(fam, lo, hi, reward=analytic.RewardSpec(kind="hard"))
    return result


def run_alpha_sweep(ctx):
    fam = ctx.family()
    th = ctx.config.values["theory"]
    reward = ctx.config.reward()
    alphas = np.linspace(0.0, 1.0, th["sweep_points"])
    sweep_rows, star_rows, curves = [], [], {}
    for tau in th["sweep_taus"]:
        term = [theory.l_term_alpha(a, tau, fam, reward) for a in alphas]
        rlhf = [theory.l_rlhf_alpha(a, tau, fam, reward) for a in alphas]
        ikl = [theory.l_ikl_alpha(a, tau, fam, reward) for a in alphas]
        sweep_rows += [(tau, a, x, y, z) for a, x, y, z in zip(alphas, term, rlhf, ikl)]
        curves[f"terminal tau={tau:g}"] = term
        curves[f"trajectory-tilted tau={tau:g}"] = ikl
        star_rows.append(
            (
                tau,
                theory.term_minimizer(fam, tau, reward),
                theory.minimize_alpha(lambda a, t: theory.l_rlhf_alpha(a, t, fam, reward), tau),
                theory.minimize_alpha(lambda a, t: theory.l_ikl_alpha(a, t, fam, reward), tau),
                analytic.tilted_positive_mass(fam.base, reward.replace(tau=tau)),
            )
        )
    ctx.csv("alpha_sweep.csv", ("tau", "alpha", "l_term", "l_rlhf", "l_ikl"), sweep_rows)
    ctx.csv("alpha_star.csv", ("tau", "alpha_star_term", "alpha_star_rlhf", "alpha_star_ikl", "target_positive_mass"), star_rows)
    ctx.figure("alpha_sweep_figure", "alpha_sweep.png", alphas, curves)
    return {"alpha_star": [dict(zip(("tau", "term", "rlhf", "ikl", "target"), r)) for r in star_rows]}


def run_validate_grad(ctx):
    th = ctx.config.values["theory"]
    reward = ctx.config.reward()
    report = theory.ikl_gradient_check(ctx.family(), reward, reward.tau, th["grad_alphas"], th["grad_times"])
    ctx.csv("gradient_check.csv", ("alpha", "t", "finite_difference", "score_form", "rel_error"), [astuple(r) for r in report.rows])
    return {"max_rel_error": report.max_rel_error}


# reward-score estimator


def run_validate_drs(ctx):
    cfg = ctx.config
    pipe = cfg.pipeline()
    v = cfg.values["validate"]
    drp_cfg = cfg.drp()
    reward = cfg.reward()
    gmm, schedule = pipe.gmm, pipe.schedule
    if drp_cfg.chain_kind == "euler-flow":
        reference = diffusion.GmmVelocity(gmm)
    elif v["reference"] == "checkpoint":
        net = _load_net(cfg["reference.checkpoint"], os.path.join(ctx.out, "checkpoints", "reference.npz"), "reference")
        reference = diffusion.NetScore(net, schedule)
    else:
        reference = diffusion.GmmScore(gmm, schedule)
    rng = stream(cfg.seed, "validate", 0)
    ts = rng.uniform(v["t_low"], v["t_high"], v["points"])
    xs = rng.uniform(-v["x_range"], v["x_range"], v["points"])
    chain_rows, summary_rows = [], []
    for i, (t, x) in enumerate(zip(ts, xs)):
        res = drp_estimate(reference, reward, schedule, t, np.full(v["repeats"], x), drp_cfg, stream(cfg.seed, "validate", 1, i))
        keep = min(v["dump_rows"], v["repeats"])
        for rep in range(keep):
            for k in range(drp_cfg.chains):
                chain_rows.append((i, rep, t, x, k, res.proposals[k, rep], res.chain_rewards[k, rep], res.weights[k, rep], res.chain_grads[k, rep]))
        mean = float(np.mean(res.estimate))
        se = float(np.std(res.estimate, ddof=1) / np.sqrt(v["repeats"]))
        if drp_cfg.chain_kind == "euler-flow":
            exact = cg = float("nan")
        else:
            exact = float(analytic.analytic_drs(gmm, reward, schedule, t, x))
            cg = float(cg_approx(gmm, reward, schedule, t, x))
        summary_rows.append((i, t, x, exact, mean, se, (mean - exact) / se if se > 0 else float("nan"), cg))
    ctx.csv("drp_chains.csv", ("point", "repeat", "t", "x_t", "chain", "endpoint", "reward", "weight", "gradient"), chain_rows)
    ctx.csv("drp_summary.csv", ("point", "t", "x_t", "analytic_drs", "drp_mean", "drp_se", "z_score", "cg_approx"), summary_rows)
    z = [abs(r[6]) for r in summary_rows if np.isfinite(r[6])]
    return {"max_abs_z": max(z) if z else None, "points": len(summary_rows)}


# training pipeline


def _train_reference(ctx, pipe):
    net, losses = training.train_reference(pipe.gmm, pipe)
    net.save(os.path.join(ctx.checkpoint_dir(), "reference.npz"))
    ctx.csv("reference_loss.csv", ("step", "dsm_loss"), enumerate(losses, 1))
    ctx.figure("loss_figure", "reference_loss.png", losses, "reference DSM")
    return net, {"final_dsm_loss": float(np.mean(losses[-100:])) if len(losses) else None, "digest": net.digest()}


def _distill(ctx, pipe, reference):
    gen, losses = training.distill_generator(reference, pipe)
    gen.save(os.path.join(ctx.checkpoint_dir(), "generator.npz"))
    ctx.csv("distill_loss.csv", ("step", "regression_loss"), enumerate(losses, 1))
    ctx.figure("loss_figure", "distill_loss.png", losses, "distillation")
    m = training.evaluate_generator(gen, pipe, pipe.eval_samples)
    return gen, {"final_loss": float(np.mean(losses[-100:])) if len(losses) else None, "p_positive": m.p_positive, "kl_to_qstar": m.kl_to_qstar}


def _align(ctx, pipe, reference, generator, method):
    cfg = pipe.with_method(method)
    res = training.run_alignment(cfg, reference, generator)
    ckpt = ctx.checkpoint_dir()
    res.generator.save(os.path.join(ckpt, f"generator_{method}.npz"))
    res.ta.save(os.path.join(ckpt, f"ta_{method}.npz"))
    ctx.csv(f"metrics_{method}.csv", training.METRIC_COLUMNS, [m.row() for m in res.history + [res.final]])
    final = dict(zip(training.METRIC_COLUMNS, res.final.row()))
    final["target_mass"] = theory.target_mass(cfg.reward.tau)
    final["target_mass_training_reward"] = analytic.tilted_positive_mass(cfg.gmm, cfg.reward)
    return res, final


def _samples(generator, pipe):
    z = stream(pipe.seed, "eval", pipe.outer_steps).standard_normal(pipe.eval_samples)
    return training.generate(generator, z)


def run_train_ref(ctx):
    _, result = _train_reference(ctx, ctx.config.pipeline())
    return result


def run_distill(ctx):
    cfg = ctx.config
    reference = _load_net(cfg["reference.checkpoint"], os.path.join(ctx.out, "checkpoints", "reference.npz"), "reference")
    _, result = _distill(ctx, cfg.pipeline(), reference)
    return result


def run_align(ctx):
    cfg = ctx.config
    pipe = cfg.pipeline()
    ckpt = os.path.join(ctx.out, "checkpoints")
    reference = _load_net(cfg["reference.checkpoint"], os.path.join(ckpt, "reference.npz"), "reference")
    generator = _load_net(cfg["distill.checkpoint"], os.path.join(ckpt, "generator.npz"), "generator")
    res, final = _align(ctx, pipe, reference, generator, pipe.method)
    ctx.figure("alignment_figure", "p_positive.png", {pipe.method: res.history}, theory.target_mass(pipe.reward.tau))
    ctx.figure("histogram_figure", "histogram.png", {pipe.method: _samples(res.generator, pipe)}, pipe.gmm, pipe.reward.replace(kind="hard"))
    return {"final": final}


def run_full_toy(ctx):
    pipe = ctx.config.pipeline()
    reference, ref_result = _train_reference(ctx, pipe)
    generator, distill_result = _distill(ctx, pipe, reference)
    results, histories, samples = {}, {}, {}
    for method in training.METHODS:
        res, final = _align(ctx, pipe, reference, generator, method)
        results[method] = final
        histories[method] = res.history
        samples[method] = _samples(res.generator, pipe)
    ctx.csv("final.csv", ("method",) + training.METRIC_COLUMNS[2:], [(m,) + tuple(results[m][c] for c in training.METRIC_COLUMNS[2:]) for m in training.METHODS])
    ctx.figure("alignment_figure", "p_positive.png", histories, theory.target_mass(pipe.reward.tau))
    ctx.figure("histogram_figure", "histogram.png", samples, pipe.gmm, pipe.reward.replace(kind="hard"))
    return {"reference": ref_result, "distill": distill_result, "final": results}


RUNNERS = {
    "threshold-scan": run_threshold_scan,
    "alpha-sweep": run_alpha_sweep,
    "train-ref": run_train_ref,
    "distill": run_distill,
    "align": run_align,
    "validate-drs": run_validate_drs,
    "validate-grad": run_validate_grad,
    "full-toy": run_full_toy,
}


def run_experiment(config, figures=True):
    if config.kind not in RUNNERS:
        raise ConfigError(f"unknown experiment kind {config.kind!r}", "experiment.kind")
    ctx = Context(config, figures)
    return ctx, RUNNERS[config.kind](ctx)
