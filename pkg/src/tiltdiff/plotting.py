"""PNG figures rendered next to the CSV output (non-interactive backend)."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import analytic  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def threshold_scan_figure(rows, path):
    taus = [r.tau for r in rows]
    stars = [r.alpha_star for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(taus, stars, "o-", ms=3)
    ax.axvline(rows[0].tau_crit_closed, color="k", ls="--", lw=1, label="closed-form threshold")
    ax.set_xlabel("tau")
    ax.set_ylabel("alpha*")
    ax.set_title("terminal-reward minimiser")
    ax.legend(loc="best", fontsize=8)
    return _save(fig, path)


def alpha_sweep_figure(alphas, curves, path):
    """``curves`` maps a label to an array over ``alphas``."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, values in curves.items():
        values = np.asarray(values)
        ax.plot(alphas, values - np.min(values), label=label)
    ax.set_xlabel("alpha")
    ax.set_ylabel("objective - min")
    ax.legend(loc="best", fontsize=7)
    return _save(fig, path)


def loss_figure(losses, title, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    steps = np.arange(1, len(losses) + 1)
    ax.plot(steps, losses, lw=0.5)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    return _save(fig, path)


def alignment_figure(histories, target, path):
    """``histories`` maps a method name to its list of metric rows."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method, rows in histories.items():
        ax.plot([r.outer_step for r in rows], [r.p_positive for r in rows], label=method)
    ax.axhline(target, color="k", ls="--", lw=1, label="tilted target")
    ax.set_xlabel("outer step")
    ax.set_ylabel("P(x > 0)")
    ax.set_ylim(0, 1.02)
    ax.legend(loc="best", fontsize=8)
    return _save(fig, path)


def histogram_figure(samples, gmm, reward, path):
    """Sample histograms per method against the reference and tilted densities."""
    lo, hi = gmm.support(width=6.0)
    grid = np.linspace(lo, hi, 600)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, x in samples.items():
        ax.hist(x, bins=120, range=(lo, hi), density=True, histtype="step", label=label)
    ax.plot(grid, gmm.density(grid), "k:", lw=1, label="reference")
    ax.plot(grid, analytic.tilted_density(gmm, reward, grid), "k-", lw=1, label="tilted target")
    ax.set_xlabel("x")
    ax.legend(loc="best", fontsize=7)
    return _save(fig, path)
