"""Reward-tilted diffusion targets on a 1-D toy: analytic references, estimators and training."""

__version__ = "0.1.0"
