"""Command-line entry point: ``delay-sde <command> --config run.cfg``.

Each command writes into a fresh run directory ``<out-dir>/<UTC time>-<config hash>``
together with ``manifest.json``.  Exit codes: 0 ok, 1 configuration or
input error, 2 numerical failure, 3 training divergence, 4 insufficient
history.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import platform
import sys
import warnings

import numpy as np

from . import __version__
from .config import load_config
from .errors import (
    ConfigError,
    DelaySdeError,
    Divergence,
    InsufficientHistory,
    MissingColumns,
    NonUniformSampling,
    PathTooShort,
)
from .evaluation import (
    ood_training_windows,
    plot_csv,
    run_comparison,
    run_convergence_study,
    run_nstep_eval,
    split_paths,
)
from .model import DelaySdeNet, build_windows, fit_delay_sde_net, predict
from .sdde import (
    RNG_ALGORITHM,
    benchmark_initial_path,
    benchmark_sdde_spec,
    derive_seed,
    make_time_grid,
    read_paths_csv,
    read_table,
    simulate_paths,
    write_paths_csv,
)

log = logging.getLogger("delay_sde")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_DIVERGENCE, EXIT_HISTORY = 0, 1, 2, 3, 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, Divergence):
        return EXIT_DIVERGENCE
    if isinstance(exc, (InsufficientHistory, PathTooShort)):
        return EXIT_HISTORY
    if isinstance(exc, (ConfigError, MissingColumns, NonUniformSampling, OSError)):
        return EXIT_CONFIG
    if isinstance(exc, (DelaySdeError, ArithmeticError)):
        return EXIT_NUMERIC
    return EXIT_CONFIG


def _spec(cfg):
    s = cfg["system"]
    return benchmark_sdde_spec(s["alpha"], s["lam"], s["g1_time_weight"])


def _run_dir(base, cfg, command) -> str:
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    path = os.path.join(base, f"{stamp}-{command}-{cfg.digest()[:10]}")
    os.makedirs(path, exist_ok=False)
    return path


def _manifest(run_dir, cfg, command, outputs, extra=None) -> None:
    import scipy

    data = {
        "command": command,
        "config_sha256": cfg.digest(),
        "config": cfg.as_dict(),
        "seed": cfg["run"]["seed"],
        "threads": cfg["run"]["threads"],
        "rng": RNG_ALGORITHM,
        "versions": {"delay_sde": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "outputs": sorted(outputs),
    }
    if extra:
        data.update(extra)
    with open(os.path.join(run_dir, "manifest.json"), "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=str)


def _write(run_dir, name, text) -> str:
    with open(os.path.join(run_dir, name), "w", newline="") as fh:
        fh.write(text)
    return name


# --- commands ---------------------------------------------------------------


def cmd_simulate(cfg, run_dir, args):
    s = cfg["simulate"]
    spec = _spec(cfg)
    grid = make_time_grid(s["tau"], s["horizon"], s["dt"])
    paths = simulate_paths(spec, benchmark_initial_path, grid, s["n_paths"], cfg["run"]["seed"],
                           s["blowup_cap"], cfg["run"]["threads"])
    write_paths_csv(paths, os.path.join(run_dir, "paths.csv"))
    outputs = ["paths.csv"]
    if args.ood_factor:
        ood = simulate_paths(spec.amplified(args.ood_factor), benchmark_initial_path, grid, s["n_paths"],
                             derive_seed(cfg["run"]["seed"], 31), s["blowup_cap"], cfg["run"]["threads"])
        write_paths_csv(ood, os.path.join(run_dir, "ood_paths.csv"))
        outputs.append("ood_paths.csv")
    return outputs, {"n_paths": len(paths), "grid": {"tau": grid.tau, "T": grid.horizon, "dt": grid.dt}}


def _load_paths(cfg, data):
    return read_paths_csv(data, tau=None)


def _training_log(model) -> str:
    rows = ["stage,iteration,loss"]
    for stage, st in model.states.items():
        rows += [f"{stage},{i},{loss!r}" for i, loss in enumerate(st.losses)]
    return "\n".join(rows) + "\n"


def cmd_train(cfg, run_dir, args):
    m = cfg["model"]
    paths = _load_paths(cfg, args.data)
    train_ps, val_ps, _ = split_paths(paths, m["split"])
    p, N = m["lags"], m["steps_ahead"]
    wtr = build_windows(train_ps, p, N)
    wva = build_windows(val_ps, p, N) if len(val_ps) else None
    tcfg = cfg.train_config()
    ood = None
    if cfg["sbo"]["enabled"]:
        ood = ood_training_windows(wtr, "sbo", derive_seed(cfg["run"]["seed"], p, N), cfg.sbo_configs(),
                                   cfg["sbo"]["fraction"])
    resume = DelaySdeNet.load(args.resume) if args.resume else None
    model = fit_delay_sde_net(wtr, tcfg, wva, ood, resume)
    model.config["run"] = cfg.as_dict()
    model.save(os.path.join(run_dir, "model.json"))
    _write(run_dir, "training_log.csv", _training_log(model))
    return ["model.json", "training_log.csv"], {"sigma_e": model.sigma_e}


def _read_history(path, dim):
    header, cols = read_table(path)
    if "t" not in header:
        raise MissingColumns("history CSV needs a 't' column")
    xcols = [f"x{j + 1}" for j in range(dim)]
    missing = [c for c in xcols if c not in header]
    if missing:
        raise MissingColumns(f"history CSV lacks {missing}")
    t = np.array([float(v) for v in cols["t"]])
    x = np.column_stack([[float(v) for v in cols[c]] for c in xcols])
    if len(t) > 2:
        steps = np.diff(t)
        if np.max(np.abs(steps - steps[0])) > 1e-9 * max(1.0, abs(steps[0])):
            raise NonUniformSampling("history time column is not equidistant")
    return t, x


def cmd_predict(cfg, run_dir, args):
    model = DelaySdeNet.load(args.model)
    t, x = _read_history(args.history, model.dim)
    if len(t) < model.lags:
        raise InsufficientHistory(f"need {model.lags} rows of history, got {len(t)}")
    bundle = predict(model, x, float(t[-1]), args.steps)
    if args.sigma_e is not None:
        bundle.epistemic_std = args.sigma_e * bundle.epistemic_prob
    lo, hi = bundle.ci(args.ci)
    outputs = []
    for j in range(model.dim):
        rows = [(bundle.times[i], np.nan, bundle.mean[i, j], bundle.aleatoric_std[i, j], bundle.epistemic_std,
                 lo[i, j], hi[i, j]) for i in range(len(bundle.times))]
        text = plot_csv(rows).replace("nan", "")
        outputs.append(_write(run_dir, f"prediction_x{j + 1}.csv", text))
    return outputs, {"epistemic_prob": bundle.epistemic_prob}


def cmd_convergence(cfg, run_dir, args):
    report, _ = run_convergence_study(_spec(cfg), cfg=cfg.convergence_config())
    outputs = [_write(run_dir, "convergence.csv", report.to_csv()),
               _write(run_dir, "convergence_runs.csv", report.runs_csv())]
    print(report.summary())
    mean, sd = report.gamma_spread()
    return outputs, {"gamma": report.gamma, "intercept": report.intercept, "dropped": report.dropped,
                     "gamma_seed_mean": mean, "gamma_seed_sd": sd}


def _write_report(run_dir, report):
    outputs = [_write(run_dir, "report.csv", report.to_csv())]
    for N, rows in sorted(report.plots.items()):
        outputs.append(_write(run_dir, f"plot_h{N}.csv", plot_csv(rows)))
    return outputs


def cmd_compare(cfg, run_dir, args):
    report = run_comparison(_spec(cfg), cfg.compare_config())
    return _write_report(run_dir, report), {"contamination": report.contamination}


def cmd_eval(cfg, run_dir, args):
    report = run_nstep_eval(args.data, cfg.compare_config())
    return _write_report(run_dir, report), {}


def cmd_ood(cfg, run_dir, args):
    m = cfg["model"]
    paths = _load_paths(cfg, args.data)
    train_ps = split_paths(paths, m["split"])[0]
    wtr = build_windows(train_ps, m["lags"], m["steps_ahead"])
    kind = "gaussian" if args.gaussian else "sbo"
    t, w = ood_training_windows(wtr, kind, derive_seed(cfg["run"]["seed"], m["lags"], m["steps_ahead"]),
                                cfg.sbo_configs(), cfg["sbo"]["fraction"], args.sigma)
    n, p, d = w.shape
    with open(os.path.join(run_dir, "ood_windows.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t"] + [f"x{j + 1}_lag{p - 1 - i}" for i in range(p) for j in range(d)] + ["is_ood"])
        for tt, ww in zip(wtr.times, wtr.windows):
            wr.writerow([repr(float(tt))] + [repr(float(v)) for v in ww.ravel()] + [0])
        for tt, ww in zip(t, w):
            wr.writerow([repr(float(tt))] + [repr(float(v)) for v in ww.ravel()] + [1])
    return ["ood_windows.csv"], {"n_id": len(wtr), "n_ood": n}


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "predict": cmd_predict,
    "convergence": cmd_convergence,
    "compare": cmd_compare,
    "eval": cmd_eval,
    "ood": cmd_ood,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="delay-sde", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--threads", type=int, help="override run.threads")
    common.add_argument("--out-dir", help="override run.out_dir")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate paths of the test system")
    p.add_argument("--ood-factor", type=float, default=0.0, help="also write paths with amplified diffusion")
    p = sub.add_parser("train", parents=[common], help="train a model on a path CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--resume", help="continue training from a saved model.json")
    p = sub.add_parser("predict", parents=[common], help="forecast from a history CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--history", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--ci", type=float, default=0.95)
    p.add_argument("--sigma-e", type=float, default=None, help="override the tuned epistemic scale")
    sub.add_parser("convergence", parents=[common], help="discretisation convergence study")
    sub.add_parser("compare", parents=[common], help="simulated comparison against VAR and SDE-net")
    p = sub.add_parser("eval", parents=[common], help="N-step evaluation of a path or series CSV")
    p.add_argument("--data", required=True)
    p = sub.add_parser("ood", parents=[common], help="write OOD windows for a path CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--gaussian", action="store_true", help="plain Gaussian offset instead of SBO")
    p.add_argument("--sigma", type=float, default=1.0)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore", RuntimeWarning)
    env = dict(os.environ)
    for key, name in (("seed", "DSDE_RUN__SEED"), ("threads", "DSDE_RUN__THREADS"), ("out_dir", "DSDE_RUN__OUT_DIR")):
        val = getattr(args, key)
        if val is not None:
            env[name] = str(val)
    try:
        cfg = load_config(args.config, environ=env)
        run_dir = _run_dir(cfg["run"]["out_dir"], cfg, args.command)
        outputs, extra = COMMANDS[args.command](cfg, run_dir, args)
        _manifest(run_dir, cfg, args.command, outputs, extra)
    except Exception as exc:  # mapped to documented exit codes
        code = exit_code_for(exc)
        print(f"delay-sde {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return code
    print(run_dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
