"""INI run configuration with a typed schema.

Every key must appear in ``SCHEMA``; unknown sections or keys are errors.
Any key can be overridden from the environment as
``DSDE_<SECTION>__<KEY>`` (upper case), e.g. ``DSDE_DRIFT__ITERATIONS=100``.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os

from .errors import ConfigError
from .evaluation import CompareConfig, ConvergenceConfig
from .model import TrainConfig
from .ood import BENCHMARK_OOD_INTERVALS, GUARDS, SboConfig
from .shallow_net import SgdConfig

ENV_PREFIX = "DSDE_"


def _batch(s: str):
    s = s.strip()
    return "full" if s == "full" else int(s)


def _ints(s: str) -> tuple:
    return tuple(int(x) for x in s.replace(",", " ").split())


def _floats(s: str) -> tuple:
    return tuple(float(x) for x in s.replace(",", " ").split())


def _words(s: str) -> tuple:
    return tuple(x for x in s.replace(",", " ").split())


def _intervals(s: str) -> tuple:
    """``year:first-last`` items separated by commas; ``none`` for no intervals."""
    s = s.strip()
    if s in ("", "none"):
        return ()
    if s == "benchmark":
        return BENCHMARK_OOD_INTERVALS
    out = []
    for item in s.split(","):
        year, days = item.strip().split(":")
        first, last = days.split("-")
        out.append((int(year), int(first), int(last)))
    return tuple(out)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_SGD = {
    "learning_rate": (float, None),
    "momentum": (float, 0.9),
    "weight_decay": (float, 5e-5),
    "iterations": (int, None),
    "minibatch_size": (_batch, "full"),
}

SCHEMA = {
    "run": {"seed": (int, 0), "threads": (int, os.cpu_count() or 1), "out_dir": (str, "runs")},
    "system": {
        "alpha": (float, 1.0),
        "lam": (float, 1.0),
        "g1_time_weight": (float, -5 / 365),
    },
    "simulate": {
        "tau": (float, 4.0),
        "horizon": (float, 365.0),
        "dt": (float, 1.0),
        "n_paths": (int, 110),
        "blowup_cap": (float, 1e12),
    },
    "model": {
        "lags": (int, 4),
        "steps_ahead": (int, 1),
        "width": (int, 32),
        "drift_activation": (str, "tanh"),
        "aleatoric_activation": (str, "tanh"),
        "epistemic_activation": (str, "tanh"),
        "activation_param": (float, 1.0),
        "validate_every": (int, 0),
        "split": (_floats, (0.8, 0.1, 0.1)),
    },
    "drift": dict(_SGD, learning_rate=(float, 0.025), weight_decay=(float, 8e-3),
                  iterations=(int, 3000), minibatch_size=(_batch, 1024)),
    "aleatoric": dict(_SGD, learning_rate=(float, 0.001), iterations=(int, 2000), minibatch_size=(_batch, 1024)),
    "epistemic": dict(_SGD, learning_rate=(float, 0.2), iterations=(int, 1000)),
    "sbo": {
        "enabled": (_bool, True),
        "d_minus": (float, 2.0),
        "d_plus": (float, 1.0),
        "noise_mean": (float, 0.0),
        "noise_std": (float, 1.0),
        "modes": (_words, ("per-lag-noise", "whole-window-shift")),
        "fraction": (float, 0.25),
        "max_iters": (int, 200),
    },
    "convergence": {
        "n_paths": (int, 200),
        "n_train": (int, 140),
        "dt_ref": (float, 0.01),
        "horizon": (float, 5.0),
        "tau": (float, 15.0),
        "kappas": (_ints, (5, 10, 50, 100, 500)),
        "repeats": (int, 1),
    },
    "compare": {
        "n_paths": (int, 30),
        "split": (_floats, (24, 3, 3)),
        "horizons": (_ints, (1, 3, 7)),
        "models": (_words, ("delay", "sde-net", "var")),
        "ood_factor": (float, 2.5),
        "intervals": (_intervals, BENCHMARK_OOD_INTERVALS),
        "guard": (str, "every-point"),
        "gaussian_sigma": (float, 1.0),
        "var_order": (int, 4),
        "coordinate": (int, 1),
        "ci_level": (float, 0.95),
    },
}


class RunConfig:
    """Parsed, validated configuration: ``cfg[section][key]``."""

    def __init__(self, values: dict, source_text: str = ""):
        self.values = values
        self.source_text = source_text

    def __getitem__(self, section):
        return self.values[section]

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()

    def as_dict(self) -> dict:
        return {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in sec.items()}
                for s, sec in self.values.items()}

    # -- builders --

    def sgd(self, section) -> SgdConfig:
        s = self.values[section]
        return SgdConfig(s["learning_rate"], s["momentum"], s["weight_decay"], s["iterations"], s["minibatch_size"])

    def train_config(self) -> TrainConfig:
        m = self.values["model"]
        return TrainConfig(
            width=m["width"],
            drift_activation=m["drift_activation"],
            aleatoric_activation=m["aleatoric_activation"],
            epistemic_activation=m["epistemic_activation"],
            activation_param=m["activation_param"],
            drift=self.sgd("drift"),
            aleatoric=self.sgd("aleatoric"),
            epistemic=self.sgd("epistemic"),
            validate_every=m["validate_every"],
            seed=self.values["run"]["seed"],
        )

    def sbo_configs(self) -> list:
        s = self.values["sbo"]
        return [SboConfig(s["d_minus"], s["d_plus"], s["noise_mean"], s["noise_std"], mode, s["max_iters"])
                for mode in s["modes"]]

    def convergence_config(self) -> ConvergenceConfig:
        c = self.values["convergence"]
        return ConvergenceConfig(
            c["n_paths"], c["n_train"], c["dt_ref"], c["horizon"], c["tau"], c["kappas"],
            self.train_config(), tuple(self.values["run"]["seed"] + i for i in range(c["repeats"])),
            self.values["run"]["threads"],
        )

    def compare_config(self) -> CompareConfig:
        c, sim, sbo, m = self.values["compare"], self.values["simulate"], self.values["sbo"], self.values["model"]
        return CompareConfig(
            n_paths=c["n_paths"], split=c["split"], tau=sim["tau"], horizon=sim["horizon"], dt=sim["dt"],
            lags=m["lags"], horizons=c["horizons"], models=c["models"], ood_factor=c["ood_factor"],
            intervals=c["intervals"], guard=c["guard"], sbo_d_minus=sbo["d_minus"], sbo_d_plus=sbo["d_plus"],
            sbo_fraction=sbo["fraction"], sbo_max_iters=sbo["max_iters"], gaussian_sigma=c["gaussian_sigma"],
            var_order=c["var_order"], coordinate=c["coordinate"] - 1, ci_level=c["ci_level"],
            train=self.train_config(), seed=self.values["run"]["seed"], threads=self.values["run"]["threads"],
        )


def _validate(v: dict) -> None:
    acts = ("tanh", "sigmoid", "relu")
    m = v["model"]
    for k in ("drift_activation", "aleatoric_activation", "epistemic_activation"):
        if m[k] not in acts:
            raise ConfigError(f"model.{k} must be one of {acts}")
    if m["lags"] < 1 or m["steps_ahead"] < 1 or m["width"] < 1:
        raise ConfigError("model.lags, model.steps_ahead and model.width must be positive")
    if len(m["split"]) != 3 or min(m["split"]) < 0 or m["split"][0] <= 0:
        raise ConfigError("model.split needs three nonnegative weights with a positive train weight")
    if len(v["compare"]["split"]) != 3:
        raise ConfigError("compare.split needs three weights")
    if v["compare"]["guard"] not in GUARDS:
        raise ConfigError(f"compare.guard must be one of {GUARDS}")
    bad = set(v["compare"]["models"]) - {"delay", "sde-net", "var"}
    if bad:
        raise ConfigError(f"unknown models {sorted(bad)}")
    if not 0 < v["compare"]["ci_level"] < 1:
        raise ConfigError("compare.ci_level must lie in (0, 1)")
    if not v["compare"]["coordinate"] >= 1:
        raise ConfigError("compare.coordinate counts from 1")
    if v["run"]["threads"] < 1:
        raise ConfigError("run.threads must be at least 1")
    if v["convergence"]["repeats"] < 1:
        raise ConfigError("convergence.repeats must be at least 1")
    for s in ("drift", "aleatoric", "epistemic"):
        try:
            SgdConfig(**v[s])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{s}] {exc}") from exc
    try:
        for mode in v["sbo"]["modes"]:
            SboConfig(v["sbo"]["d_minus"], v["sbo"]["d_plus"], v["sbo"]["noise_mean"],
                      v["sbo"]["noise_std"], mode, v["sbo"]["max_iters"])
    except ValueError as exc:
        raise ConfigError(f"[sbo] {exc}") from exc


def load_config(path=None, text: str | None = None, environ=None) -> RunConfig:
    """Parse an INI file (or text), apply environment overrides and validate."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    src = ""
    try:
        if text is not None:
            src = text
        elif path is not None:
            with open(path) as fh:
                src = fh.read()
        cp.read_string(src)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    raw = {s: dict(cp[s]) for s in cp.sections()}
    environ = os.environ if environ is None else environ
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX) or "__" not in name[len(ENV_PREFIX):]:
            continue
        sec, key = name[len(ENV_PREFIX):].split("__", 1)
        raw.setdefault(sec.lower(), {})[key.lower()] = value
    values = {}
    for sec, keys in raw.items():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for k in keys:
            if k not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {sec}.{k}")
    for sec, schema in SCHEMA.items():
        out = {}
        for key, (conv, default) in schema.items():
            if key in raw.get(sec, {}):
                try:
                    out[key] = conv(raw[sec][key])
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"bad value for {sec}.{key}: {raw[sec][key]!r}") from exc
            else:
                out[key] = default
        values[sec] = out
    _validate(values)
    return RunConfig(values, src)
