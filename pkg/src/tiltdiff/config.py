"""Experiment configuration: INI sections with a typed schema and strict keys.

Every key has a default, so an empty file reproduces the reference toy
setup.  Values are overridden by a config file and then by ``--set
section.key=value`` pairs, in that order.  Unknown sections or keys, values
that do not parse as the declared type, and values rejected by the
component constructors all raise :class:`ConfigError` naming the field.
"""

import configparser
import hashlib
import io
from dataclasses import dataclass

from .analytic import RewardSpec
from .drp import DrpConfig
from .errors import ConfigError
from .training import PipelineConfig

FORMAT_VERSION = 1

KINDS = ("threshold-scan", "alpha-sweep", "train-ref", "distill", "align", "validate-drs", "validate-grad", "full-toy")

# (type, default, help); float lists are comma separated
SCHEMA = {
    "experiment": {
        "kind": (str, "full-toy", "experiment to run"),
        "seed": (int, 0, "64-bit seed for every random stream"),
        "out": (str, "runs/default", "output directory"),
        "figures": (bool, True, "render PNG figures next to the CSV output"),
    },
    "problem": {
        "mu": (float, 2.0, "mode location"),
        "sigma": (float, 0.5, "mode standard deviation"),
        "gamma": (float, 20.0, "VP rate, alpha_bar = exp(-gamma t)"),
        "t_max": (float, 0.25, "training horizon T"),
        "t_floor": (float, 1e-4, "smallest sampled time"),
    },
    "reward": {
        "kind": (str, "smooth", "smooth | hard | constant"),
        "beta": (float, 20.0, "sigmoid sharpness"),
        "tau": (float, 1.0, "temperature"),
    },
    "network": {
        "hidden_width": (int, 128, "hidden units per layer"),
        "depth": (int, 3, "hidden layers"),
    },
    "reference": {
        "steps": (int, 10_000, "DSM steps"),
        "lr": (float, 3e-4, "Adam learning rate"),
        "batch": (int, 2048, "batch size"),
        "checkpoint": (str, "", "load this reference instead of training (align/distill)"),
    },
    "distill": {
        "steps": (int, 3000, "regression steps"),
        "lr": (float, 1e-3, "Adam learning rate"),
        "batch": (int, 2048, "batch size"),
        "ddim_steps": (int, 30, "deterministic sampler steps for targets"),
        "ddim_spacing": (str, "quadratic", "sampler grid: quadratic (uniform in sqrt t) | uniform"),
        "pool": (int, 65_536, "latent draws with precomputed targets"),
        "checkpoint": (str, "", "load this generator instead of distilling (align)"),
    },
    "align": {
        "method": (str, "didr", "didr | dipp"),
        "outer_steps": (int, 6000, "outer iterations"),
        "ta_updates": (int, 5, "TA DSM steps per outer step"),
        "ta_lr": (float, 3e-4, "TA learning rate"),
        "ta_batch": (int, 2048, "TA batch size"),
        "gen_lr": (float, 1e-4, "generator learning rate"),
        "gen_batch": (int, 2048, "generator batch size"),
        "time_weight": (str, "uniform", "generator time weighting: uniform | noise-variance"),
        "dsm_weight": (str, "uniform", "DSM loss weighting: uniform | noise-variance"),
        "log_interval": (int, 100, "outer steps between metric rows"),
        "log_samples": (int, 4096, "samples per logged metric row"),
        "eval_samples": (int, 10_000, "samples for the final evaluation"),
    },
    "drp": {
        "chains": (int, 4, "K"),
        "steps": (int, 4, "S"),
        "chain_kind": (str, "ddpm-stochastic", "ddim-deterministic | ddpm-stochastic | euler-flow | exact-posterior"),
        "timestep_rule": (str, "uniform-grid", "uniform-grid | uniform-random-per-chain"),
    },
    "theory": {
        "scan_low": (float, 0.8, "scan start as a multiple of the closed-form threshold"),
        "scan_high": (float, 1.2, "scan end as a multiple of the closed-form threshold"),
        "scan_points": (int, 21, "temperatures in the scan"),
        "sweep_taus": (list, [0.5, 1.0, 2.0], "temperatures for the alpha sweep"),
        "sweep_points": (int, 41, "alpha grid points for the sweep"),
        "grad_alphas": (list, [0.3, 0.5, 0.7, 0.9], "alphas for the gradient check"),
        "grad_times": (list, [0.01, 0.03, 0.05, 0.1, 0.2], "times for the gradient check"),
    },
    "validate": {
        "reference": (str, "analytic", "analytic | checkpoint: score used by the VP chains"),
        "points": (int, 8, "(t, x_t) points"),
        "repeats": (int, 256, "independent estimates per point"),
        "t_low": (float, 0.01, "smallest validation time"),
        "t_high": (float, 0.2, "largest validation time"),
        "x_range": (float, 3.0, "x_t drawn uniformly from [-x_range, x_range]"),
        "dump_rows": (int, 64, "per-chain rows kept per point in the CSV"),
    },
}


def _parse_value(kind, raw, path):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw, 0)
        if kind is float:
            return float(raw)
        if kind is list:
            return [float(v) for v in raw.split(",") if v.strip()]
        return raw
    except ValueError:
        raise ConfigError(f"expected {kind.__name__}, got {raw!r}", path) from None


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


@dataclass
class ExperimentConfig:
    values: dict

    def __getitem__(self, path):
        section, key = path.split(".", 1)
        return self.values[section][key]

    @property
    def kind(self):
        return self["experiment.kind"]

    @property
    def seed(self):
        return self["experiment.seed"]

    def reward(self):
        v = self.values["reward"]
        return RewardSpec(kind=v["kind"], beta=v["beta"], tau=v["tau"])

    def drp(self):
        v = self.values["drp"]
        return DrpConfig(chains=v["chains"], steps=v["steps"], chain_kind=v["chain_kind"], timestep_rule=v["timestep_rule"])

    def pipeline(self):
        p, n, r, d, a = (self.values[s] for s in ("problem", "network", "reference", "distill", "align"))
        return PipelineConfig(
            mu=p["mu"],
            sigma=p["sigma"],
            gamma=p["gamma"],
            t_max=p["t_max"],
            t_floor=p["t_floor"],
            hidden_width=n["hidden_width"],
            depth=n["depth"],
            ref_steps=r["steps"],
            ref_lr=r["lr"],
            ref_batch=r["batch"],
            distill_steps=d["steps"],
            distill_lr=d["lr"],
            distill_batch=d["batch"],
            ddim_steps=d["ddim_steps"],
            ddim_spacing=d["ddim_spacing"],
            distill_pool=d["pool"],
            outer_steps=a["outer_steps"],
            ta_updates=a["ta_updates"],
            ta_lr=a["ta_lr"],
            ta_batch=a["ta_batch"],
            gen_lr=a["gen_lr"],
            gen_batch=a["gen_batch"],
            method=a["method"],
            time_weight=a["time_weight"],
            dsm_weight=a["dsm_weight"],
            drp=self.drp(),
            reward=self.reward(),
            log_interval=a["log_interval"],
            log_samples=a["log_samples"],
            eval_samples=a["eval_samples"],
            seed=self.seed,
        )

    def to_ini(self):
        parser = configparser.ConfigParser(interpolation=None)
        parser["meta"] = {"format_version": str(FORMAT_VERSION)}
        for section, entries in self.values.items():
            parser[section] = {k: _format_value(v) for k, v in entries.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def digest(self):
        """Hash of every value except the output directory."""
        values = {s: dict(v) for s, v in self.values.items()}
        values["experiment"].pop("out")
        return hashlib.sha256(ExperimentConfig(values).to_ini().encode()).hexdigest()


def defaults():
    return {s: {k: (list(v[1]) if v[0] is list else v[1]) for k, v in keys.items()} for s, keys in SCHEMA.items()}


def _apply(values, section, key, raw):
    path = f"{section}.{key}"
    if section not in SCHEMA:
        raise ConfigError(f"unknown section {section!r}", path)
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {key!r}", path)
    values[section][key] = _parse_value(SCHEMA[section][key][0], raw, path)


def parse_config(text="", overrides=(), seed=None, out=None):
    """Build a validated :class:`ExperimentConfig` from INI text and overrides.

    ``overrides`` are ``"section.key=value"`` strings.  ``seed`` and ``out``
    take precedence over both.
    """
    values = defaults()
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    for section in parser.sections():
        if section == "meta":
            continue
        for key, raw in parser.items(section):
            _apply(values, section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        path, raw = item.split("=", 1)
        section, key = path.strip().split(".", 1)
        _apply(values, section, key, raw)
    if seed is not None:
        values["experiment"]["seed"] = int(seed)
    if out is not None:
        values["experiment"]["out"] = str(out)
    config = ExperimentConfig(values)
    validate(config)
    return config


def load_config(path=None, overrides=(), seed=None, out=None):
    text = ""
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return parse_config(text, overrides, seed, out)


def validate(config):
    """Constraint checks, delegated to component constructors where they exist."""
    if config.kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {config.kind!r}", "experiment.kind")
    if not 0 <= config.seed < 2**64:
        raise ConfigError("seed must fit in 64 bits", "experiment.seed")
    p = config.values["problem"]
    for key in ("sigma", "gamma", "t_max"):
        if not p[key] > 0:
            raise ConfigError("must be positive", f"problem.{key}")
    if not p["mu"] > 0:
        raise ConfigError("must be positive", "problem.mu")
    for section, build in (("reward", config.reward), ("drp", config.drp)):
        try:
            build()
        except ValueError as exc:
            raise ConfigError(str(exc), section) from None
    try:
        config.pipeline()
    except ValueError as exc:
        raise ConfigError(str(exc), "align") from None
    t = config.values["theory"]
    if not 0 < t["scan_low"] < t["scan_high"]:
        raise ConfigError("need 0 < scan_low < scan_high", "theory.scan_low")
    if t["scan_points"] < 2 or t["sweep_points"] < 3:
        raise ConfigError("too few grid points", "theory.scan_points")
    if any(not 0 < a < 1 for a in t["grad_alphas"]):
        raise ConfigError("alphas must lie in (0, 1)", "theory.grad_alphas")
    if any(tt <= 0 for tt in t["grad_times"]):
        raise ConfigError("times must be positive", "theory.grad_times")
    if any(tau <= 0 for tau in t["sweep_taus"]):
        raise ConfigError("temperatures must be positive", "theory.sweep_taus")
    v = config.values["validate"]
    if v["points"] < 1 or not 0 < v["t_low"] <= v["t_high"] <= p["t_max"]:
        raise ConfigError("need points >= 1 and 0 < t_low <= t_high <= t_max", "validate")
    if v["repeats"] < 2:
        raise ConfigError("need at least two repeats for a standard error", "validate.repeats")
    if v["reference"] not in ("analytic", "checkpoint"):
        raise ConfigError(f"unknown reference {v['reference']!r}", "validate.reference")
    return config
