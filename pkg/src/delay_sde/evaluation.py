"""Metrics, the discretisation convergence study, the simulated comparison
and N-step evaluation of ingested series."""

from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm as _gauss
from scipy.stats import rankdata

from .baselines import day_of_year, exp_variance, fit_exp_variance, fit_var, sde_net_baseline, var_predict_windows
from .errors import InsufficientHistory, LengthMismatch, NegativeLogArgument, NotDivisible, SingleClass
from .model import (
    DelaySdeNet,
    SupervisedWindowSet,
    TrainConfig,
    build_windows,
    fit_delay_sde_net,
    residuals,
    split_counts,
)
from .ood import (
    BENCHMARK_OOD_INTERVALS,
    SboConfig,
    amplified_diffusion_paths,
    gaussian_offset,
    inject_ood_intervals,
    soft_brownian_offset,
    window_labels,
)
from .sdde import (
    PathSet,
    SddeSpec,
    TimeGrid,
    aggregate_path_increments,
    benchmark_initial_path,
    derive_seed,
    make_time_grid,
    read_paths_csv,
    read_table,
    simulate_paths,
)
from .shallow_net import SgdConfig


def rmse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if len(pred) != len(truth) or len(pred) == 0:
        raise LengthMismatch(f"rmse needs equal nonzero lengths, got {len(pred)} and {len(truth)}")
    d = pred - truth
    return math.sqrt(float(np.mean(d * d)))


def rocauc(scores, labels) -> float:
    """Mann-Whitney statistic with midranks: P(score_pos > score_neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if len(scores) != len(labels):
        raise LengthMismatch("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROCAUC needs both classes")
    r = rankdata(scores, method="average")
    u = r[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# --- convergence study ------------------------------------------------------


@dataclass
class ConvergenceConfig:
    n_paths: int = 200
    n_train: int = 140
    dt_ref: float = 0.01
    horizon: float = 5.0
    tau: float = 15.0
    kappas: tuple = (5, 10, 50, 100, 500)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        width=32,
        drift=SgdConfig(0.01, 0.9, 5e-5, 3000, 1024),
        aleatoric=SgdConfig(0.05, 0.9, 5e-5, 1000, 1024),
    ))
    seeds: tuple = (0,)
    threads: int = 1


@dataclass
class ConvergenceReport:
    """Terminal errors at the reference and coarse resolutions.

    With several seeds, ``delta_ref`` and ``deltas`` pool the squared errors
    of all test paths (root mean over seeds), ``gamma`` is fitted to the
    pooled errors and ``runs`` keeps the single-seed reports.
    """

    delta_ref: float
    deltas: list  # (kappa, dt, delta)
    gamma: float
    intercept: float
    dropped: list = field(default_factory=list)
    dt_ref: float = 0.01
    seeds: tuple = ()
    runs: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["kappa", "dt", "delta"])
        wr.writerow([1, repr(self.dt_ref), repr(self.delta_ref)])
        for kappa, dt, delta in self.deltas:
            wr.writerow([kappa, repr(dt), repr(delta)])
        return buf.getvalue()

    def runs_csv(self) -> str:
        """One row per seed: ``seed,delta_ref,delta_<kappa>...,gamma``."""
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["seed", "delta_ref"] + [f"delta_{k}" for k, _, _ in self.deltas] + ["gamma"])
        for seed, r in zip(self.seeds, self.runs):
            wr.writerow([seed, repr(r.delta_ref)] + [repr(d) for _, _, d in r.deltas] + [repr(r.gamma)])
        return buf.getvalue()

    def is_increasing(self) -> bool:
        """Errors strictly increase along the coarse resolutions."""
        d = [x[2] for x in self.deltas]
        return all(b > a for a, b in zip(d, d[1:]))

    def exceeds_reference(self) -> bool:
        return all(x[2] > self.delta_ref for x in self.deltas)

    def gamma_spread(self) -> tuple:
        """Mean and sample standard deviation of the single-seed slopes (NaN slopes skipped)."""
        g = np.array([r.gamma for r in self.runs], dtype=float)
        g = g[np.isfinite(g)]
        if len(g) == 0:
            return float("nan"), float("nan")
        return float(g.mean()), float(g.std(ddof=1)) if len(g) > 1 else 0.0

    def summary(self) -> str:
        mean, sd = self.gamma_spread()
        lines = [f"delta_ref {self.delta_ref:.4f}"]
        lines += [f"kappa {k:>4d}  dt {dt:<5g} delta {d:.4f}" for k, dt, d in self.deltas]
        lines.append(f"gamma (pooled) {self.gamma:.4f}")
        if len(self.runs) > 1:
            lines.append(f"gamma per seed {mean:.4f} +- {sd:.4f} over {len(self.runs)} seeds")
        return "\n".join(lines)


def convergence_slope(dts, deltas, delta_ref):
    """OLS slope and intercept of ``ln(delta - delta_ref)`` on ``ln dt``.

    Points with ``delta <= delta_ref`` are dropped with a warning; fewer than
    two remaining points raise NegativeLogArgument.
    """
    dts = np.asarray(dts, dtype=float)
    diff = np.asarray(deltas, dtype=float) - delta_ref
    ok = diff > 0
    dropped = dts[~ok].tolist()
    if dropped:
        warnings.warn(f"dropping resolutions {dropped}: error not above the reference", stacklevel=2)
    if ok.sum() < 2:
        raise NegativeLogArgument("need two resolutions whose error exceeds the reference error")
    slope, intercept = np.polyfit(np.log(dts[ok]), np.log(diff[ok]), 1)
    return float(slope), float(intercept), dropped


def coarse_windows(values: np.ndarray, L: int, p: int, kappa: int) -> np.ndarray:
    """Windows ``x(t_{-(p-1)kappa}), ..., x(t_0)`` taken ``kappa`` fine steps apart."""
    if (p - 1) * kappa > L:
        raise InsufficientHistory(f"initial segment of {L} steps cannot supply {p} lags {kappa} apart")
    pos = L - kappa * np.arange(p - 1, -1, -1)
    return values[:, pos]


def terminal_error(model: DelaySdeNet, paths: PathSet, kappa: int, dt_ref: float) -> float:
    """L2 error at ``T`` of the fitted model stepped at ``kappa*dt_ref`` along each path's own Brownian path."""
    g = paths.grid
    if g.K % kappa:
        raise NotDivisible(f"K={g.K} not divisible by kappa={kappa}")
    init = coarse_windows(paths.values, g.L, model.lags, kappa)
    inc = aggregate_path_increments(paths.increments, kappa)
    coarse = replace(model, dt=kappa * dt_ref)
    out = coarse.simulate(0.0, init, inc)
    err = out[:, -1] - paths.values[:, -1]
    return math.sqrt(float(np.mean(np.sum(err * err, axis=1))))


def _slope_or_nan(dts, deltas, delta_ref):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            return convergence_slope(dts, deltas, delta_ref)
        except NegativeLogArgument:
            return float("nan"), float("nan"), list(dts)


def _convergence_run(spec, cfg, seed, eta_gen):
    grid = make_time_grid(cfg.tau, cfg.horizon, cfg.dt_ref)
    paths = simulate_paths(spec, eta_gen, grid, cfg.n_paths, seed)
    train, test = paths.subset(range(cfg.n_train)), paths.subset(range(cfg.n_train, cfg.n_paths))
    model = fit_delay_sde_net(build_windows(train, spec.lags, 1), replace(cfg.train, seed=seed))
    delta_ref = terminal_error(model, test, 1, cfg.dt_ref)
    rows = [(int(k), k * cfg.dt_ref, terminal_error(model, test, int(k), cfg.dt_ref)) for k in cfg.kappas]
    gamma, intercept, dropped = _slope_or_nan([r[1] for r in rows], [r[2] for r in rows], delta_ref)
    return ConvergenceReport(delta_ref, rows, gamma, intercept, dropped, cfg.dt_ref, (seed,)), model


def run_convergence_study(spec: SddeSpec, m: int | None = None, seeds=None, cfg: ConvergenceConfig | None = None,
                          eta_gen=benchmark_initial_path):
    """Reference fit at ``dt_ref`` and terminal errors at coarser resolutions.

    ``m`` overrides the network width and ``seeds`` the configured seeds.
    Every seed simulates its own paths, fits its own model and rolls the test
    paths forward along their own Brownian increments.  Returns
    ``(ConvergenceReport, models)``.  The diffusion of each fitted model is
    its aleatoric net only (no classifier is trained, so ``sigma_e = 0``).
    Raises NegativeLogArgument when fewer than two pooled coarse errors
    exceed the pooled reference error.
    """
    cfg = cfg or ConvergenceConfig()
    if m is not None:
        cfg = replace(cfg, train=replace(cfg.train, width=int(m)))
    seeds = tuple(int(s) for s in (cfg.seeds if seeds is None else seeds))
    if not seeds:
        raise ValueError("need at least one seed")

    def work(seed):
        return _convergence_run(spec, cfg, seed, eta_gen)

    if cfg.threads > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            results = list(ex.map(work, seeds))
    else:
        results = [work(s) for s in seeds]
    runs = [r for r, _ in results]
    pool = lambda xs: math.sqrt(float(np.mean(np.square(xs))))
    delta_ref = pool([r.delta_ref for r in runs])
    rows = [(k, dt, pool([r.deltas[i][2] for r in runs])) for i, (k, dt, _) in enumerate(runs[0].deltas)]
    gamma, intercept, dropped = convergence_slope([r[1] for r in rows], [r[2] for r in rows], delta_ref)
    report = ConvergenceReport(delta_ref, rows, gamma, intercept, dropped, cfg.dt_ref, seeds, runs)
    return report, [mdl for _, mdl in results]


# --- comparison study -------------------------------------------------------

MODELS = ("delay", "sde-net", "var")
REPORT_COLUMNS = ("horizon", "model", "value_rmse", "var_rmse", "rocauc", "unc_rmse")


@dataclass
class CompareConfig:
    n_paths: int = 30
    split: tuple = (24, 3, 3)
    tau: float = 4.0
    horizon: float = 365.0
    dt: float = 1.0
    lags: int = 4
    horizons: tuple = (1, 3, 7)
    models: tuple = MODELS
    ood_factor: float = 2.5
    intervals: tuple = BENCHMARK_OOD_INTERVALS
    guard: str = "every-point"
    sbo_d_minus: float = 2.0
    sbo_d_plus: float = 1.0
    sbo_fraction: float = 0.25
    sbo_max_iters: int = 200
    gaussian_sigma: float = 1.0
    var_order: int = 4
    coordinate: int = 0
    ci_level: float = 0.95
    train: TrainConfig = field(default_factory=lambda: default_compare_train())
    seed: int = 0
    threads: int = 1


def default_compare_train() -> TrainConfig:
    return TrainConfig(
        width=32,
        drift=SgdConfig(0.025, 0.9, 8e-3, 3000, 1024),
        aleatoric=SgdConfig(0.001, 0.9, 5e-5, 2000, 1024),
        epistemic=SgdConfig(0.2, 0.9, 5e-5, 1000, "full"),
    )


@dataclass
class ReportRow:
    horizon: int
    model: str
    value_rmse: float
    var_rmse: float | None = None
    rocauc: float | None = None
    unc_rmse: float | None = None


@dataclass
class ComparisonReport:
    rows: list
    contamination: float | None = None
    plots: dict = field(default_factory=dict)  # horizon -> plot rows for the delay model
    models: dict = field(default_factory=dict)

    def columns(self) -> tuple:
        if all(r.rocauc is None for r in self.rows):
            return tuple(c for c in REPORT_COLUMNS if c != "rocauc")
        return REPORT_COLUMNS

    def to_csv(self) -> str:
        cols = self.columns()
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(cols)
        for r in self.rows:
            wr.writerow(["" if getattr(r, c) is None else (repr(getattr(r, c)) if isinstance(getattr(r, c), float) else getattr(r, c)) for c in cols])
        return buf.getvalue()

    def get(self, model: str, horizon: int) -> ReportRow:
        for r in self.rows:
            if r.model == model and r.horizon == horizon:
                return r
        raise KeyError((model, horizon))


PLOT_COLUMNS = ("t", "truth", "mean", "std_a", "std_e", "ci_lo", "ci_hi")


def plot_csv(rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(PLOT_COLUMNS)
    for row in rows:
        wr.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def true_accumulated_variance(spec: SddeSpec, ws: SupervisedWindowSet, paths: PathSet, coordinate=None) -> np.ndarray:
    """``sum_{i<N} g(t_k + i dt, initial window)**2 dt`` of the generating system."""
    g = paths.grid
    w0 = paths.values[:, g.L + 1 - spec.lags : g.L + 1][ws.path_index]
    acc = np.zeros((len(ws), spec.dim))
    for i in range(ws.horizon):
        acc += spec.diffusion(ws.times + i * ws.dt, w0) ** 2
    acc *= ws.dt
    return acc if coordinate is None else acc[:, coordinate]


def _day_index(start_index, step):
    # target grid index k = start + step, day of year ((k - 1) mod 365) + 1
    return day_of_year(np.asarray(start_index) + step - 1)


def _var_series(paths: PathSet, p: int) -> list:
    g = paths.grid
    first = max(0, g.L - (p - 1))
    return [v[first:] for v in paths.values]


def ood_training_windows(wtr: SupervisedWindowSet, kind: str, seed: int, sbo_configs=(), fraction: float = 0.25,
                         sigma: float = 1.0):
    """OOD windows for the classifier: SBO in each configured mode, or one Gaussian-offset set.

    Each SBO mode contributes ``fraction * len(wtr)`` points; the Gaussian
    set has the same total size.
    """
    n = int(round(fraction * len(wtr)))
    if kind == "sbo":
        parts = [soft_brownian_offset(wtr.times, wtr.windows, c, n, derive_seed(seed, 21, i))
                 for i, c in enumerate(sbo_configs)]
    else:
        parts = [gaussian_offset(wtr.times, wtr.windows, sigma, n * max(len(sbo_configs), 1), derive_seed(seed, 22))]
    return np.concatenate([o.times for o in parts]), np.concatenate([o.windows for o in parts])


def sbo_configs_of(cfg: CompareConfig) -> list:
    return [SboConfig(cfg.sbo_d_minus, cfg.sbo_d_plus, mode=mode, max_iters=cfg.sbo_max_iters)
            for mode in ("per-lag-noise", "whole-window-shift")]


def _fit_net(train_ps, val_ps, p, N, tcfg, ood_kind, cfg):
    def ood_fn(wtr):
        return ood_training_windows(wtr, ood_kind, derive_seed(cfg.seed, p, N), sbo_configs_of(cfg),
                                    cfg.sbo_fraction, cfg.gaussian_sigma)

    if p == 1:
        return sde_net_baseline(train_ps, N, tcfg, val_ps, ood_fn)
    wtr = build_windows(train_ps, p, N)
    return fit_delay_sde_net(wtr, tcfg, build_windows(val_ps, p, N), ood_fn(wtr))


def _net_rows(model, test_ps, p, N, cfg, spec, contaminated, want_plot):
    c = cfg.coordinate
    wte = build_windows(test_ps, p, N)
    e = residuals(model, wte)[:, c]
    std_a = np.sqrt(model.accumulated_variance(wte.times, wte.windows, N))[:, c]
    std_e = model.sigma_e * model.epistemic_prob(wte.times, wte.windows)
    row = ReportRow(N, "", rmse(e, 0.0 * e))
    row.unc_rmse = rmse((std_a + std_e) ** 2, e * e)
    if spec is not None:
        row.var_rmse = rmse(std_a**2, true_accumulated_variance(spec, wte, test_ps, c))
    if contaminated is not None:
        labels = window_labels(contaminated, p, N)
        if labels.any() and not labels.all():
            wst = build_windows(contaminated.paths, p, N)
            row.rocauc = rocauc(model.epistemic_prob(wst.times, wst.windows), labels)
    plot = None
    if want_plot:
        sel = wte.path_index == 0
        mean = e[sel] + wte.targets[sel, c]
        tot = std_a[sel] + std_e[sel]
        z = _gauss.ppf(0.5 + cfg.ci_level / 2.0)
        plot = np.column_stack([
            wte.times[sel] + N * wte.dt, wte.targets[sel, c], mean, std_a[sel], std_e[sel],
            mean - z * tot, mean + z * tot,
        ])
    return row, plot


def _var_rows(vm, test_ps, p, N, cfg, spec):
    c = cfg.coordinate
    wte = build_windows(test_ps, p, N)
    pred = var_predict_windows(vm, wte.windows, N)[:, -1, c]
    e = pred - wte.targets[:, c]
    steps = np.arange(N)
    var = exp_variance(vm.variance, _day_index(wte.start_index[:, None], steps + 1))[..., c].sum(axis=1)
    row = ReportRow(N, "var", rmse(e, 0.0 * e))
    row.unc_rmse = rmse(var, e * e)
    if spec is not None:
        row.var_rmse = rmse(var, true_accumulated_variance(spec, wte, test_ps, c))
    return row


def evaluate_paths(train_ps: PathSet, val_ps: PathSet, test_ps: PathSet, cfg: CompareConfig,
                   spec: SddeSpec | None = None, contaminated=None) -> ComparisonReport:
    """Train every requested model per horizon and score it on the clean test paths.

    ``spec`` (the generating system) enables the aleatoric-variance column;
    ``contaminated`` (a ContaminatedSet of the test paths) enables ROCAUC.
    Work items run on ``cfg.threads`` workers; rows are assembled in a fixed
    order so the report does not depend on the thread count.
    """
    jobs = []
    for N in cfg.horizons:
        for name in cfg.models:
            jobs.append((N, name))

    vm = None
    if "var" in cfg.models:
        vm, res = fit_var(_var_series(train_ps, cfg.var_order), cfg.var_order)
        # residual rows follow the series order: target index k runs from max(0, ...) + 1.. K per path
        g = train_ps.grid
        first_target = max(0, g.L - (cfg.var_order - 1)) + cfg.var_order - g.L
        k = np.tile(np.arange(first_target, g.K + 1) + g.origin, len(train_ps))
        a, b = fit_exp_variance(res, day_of_year(k - 1))
        vm.variance = np.column_stack([a, b])

    def work(job):
        N, name = job
        if name == "var":
            return _var_rows(vm, test_ps, cfg.var_order, N, cfg, spec), None, None
        p = cfg.lags if name == "delay" else 1
        model = _fit_net(train_ps, val_ps, p, N, cfg.train, "sbo" if name == "delay" else "gaussian", cfg)
        row, plot = _net_rows(model, test_ps, p, N, cfg, spec, contaminated, name == "delay")
        row.model = name
        return row, plot, model

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            results = list(ex.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    report = ComparisonReport([r[0] for r in results],
                              None if contaminated is None else contaminated.contamination)
    for (N, name), (_, plot, model) in zip(jobs, results):
        if plot is not None:
            report.plots[N] = plot
        if model is not None:
            report.models[(name, N)] = model
    if vm is not None:
        report.models["var"] = vm
    return report


def split_paths(paths: PathSet, weights):
    counts = split_counts(len(paths), dict(enumerate(weights)))
    out, start = [], 0
    for i in range(len(weights)):
        out.append(paths.subset(range(start, start + counts[i])))
        start += counts[i]
    return out


def run_comparison(spec: SddeSpec, cfg: CompareConfig, eta_gen=benchmark_initial_path) -> ComparisonReport:
    """Simulate, contaminate the test years with amplified-noise segments and compare models."""
    grid = make_time_grid(cfg.tau, cfg.horizon, cfg.dt)
    paths = simulate_paths(spec, eta_gen, grid, cfg.n_paths, cfg.seed, threads=cfg.threads)
    train_ps, val_ps, test_ps = split_paths(paths, cfg.split)
    contaminated = None
    intervals = [iv for iv in cfg.intervals if iv[0] <= len(test_ps)]
    if intervals and cfg.ood_factor:
        ood = amplified_diffusion_paths(spec, cfg.ood_factor, eta_gen, grid, len(train_ps),
                                        derive_seed(cfg.seed, 31), threads=cfg.threads)
        contaminated = inject_ood_intervals(test_ps, ood, intervals, train_ps.values,
                                            seed=derive_seed(cfg.seed, 32), guard=cfg.guard)
    return evaluate_paths(train_ps, val_ps, test_ps, cfg, spec, contaminated)


def series_to_paths(series: PathSet, weights, p: int):
    """Cut one long equidistant series into consecutive train/validation/test pieces.

    Each piece after the first carries the ``p - 1`` points preceding it as
    its initial segment, so its first own point already has a full window.
    Pieces keep their position in the series through the grid origin.
    """
    g = series.grid
    values = series.values[0]
    counts = split_counts(len(values), dict(enumerate(weights)))
    out, start = [], 0
    for i in range(len(weights)):
        stop = start + counts[i]
        lo = max(0, start - (p - 1)) if i else 0
        L = start - lo
        K = stop - 1 - start
        grid = TimeGrid(L * g.dt, K * g.dt, g.dt, L, K, g.origin - g.L + start)
        out.append(PathSet(grid, values[lo:stop][None]))
        start = stop
    return out


def run_nstep_eval(csv_path, cfg: CompareConfig) -> ComparisonReport:
    """Evaluate every model on an ingested series.

    A CSV with a ``path_id`` column is split by path (like simulated years);
    a single series is split by date into consecutive pieces.  No generating
    system or OOD labels are available, so only value and uncertainty RMSE
    are reported.
    """
    header, _ = read_table(csv_path)
    if "path_id" in header:
        paths = read_paths_csv(csv_path, tau=cfg.tau)
        train_ps, val_ps, test_ps = split_paths(paths, cfg.split)
    else:
        ps = read_paths_csv(csv_path, tau=0.0)
        train_ps, val_ps, test_ps = series_to_paths(ps, cfg.split, max(cfg.lags, cfg.var_order))
    return evaluate_paths(train_ps, val_ps, test_ps, cfg)
