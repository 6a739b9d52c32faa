import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delay_sde.errors import LengthMismatch, NegativeLogArgument, SingleClass
from delay_sde.evaluation import (
    CompareConfig,
    ConvergenceConfig,
    ConvergenceReport,
    coarse_windows,
    convergence_slope,
    rmse,
    rocauc,
    run_comparison,
    run_convergence_study,
    run_nstep_eval,
    series_to_paths,
    terminal_error,
)
from delay_sde.model import DelaySdeNet, TrainConfig
from delay_sde.sdde import (
    aggregate_path_increments,
    benchmark_initial_path,
    benchmark_sdde_spec,
    make_time_grid,
    read_paths_csv,
    simulate_paths,
    write_path_csv,
    write_paths_csv,
)
from delay_sde.shallow_net import SgdConfig

TINY = TrainConfig(
    width=4,
    drift=SgdConfig(0.01, 0.9, 5e-5, 20, 256),
    aleatoric=SgdConfig(0.01, 0.9, 5e-5, 10, 256),
    epistemic=SgdConfig(0.05, 0.9, 5e-5, 10, "full"),
    seed=0,
)


# --- rmse ----------------------------------------------------------------------


def test_rmse_identical_is_zero():
    x = np.random.default_rng(0).normal(size=50)
    assert rmse(x, x) == 0.0


def test_rmse_small_oracle():
    assert rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5), abs=1e-15)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=200), st.integers(0, 1000))
@settings(max_examples=50, deadline=None)
def test_rmse_matches_pairwise_sum(pred, seed):
    truth = np.random.default_rng(seed).normal(size=len(pred))
    sq = [(p - t) ** 2 for p, t in zip(pred, truth)]

    def pairwise(xs):
        if len(xs) <= 2:
            return sum(xs)
        h = len(xs) // 2
        return pairwise(xs[:h]) + pairwise(xs[h:])

    ref = math.sqrt(pairwise(sq) / len(sq))
    assert rmse(pred, truth) == pytest.approx(ref, rel=1e-12, abs=1e-300)


def test_rmse_length_checks():
    with pytest.raises(LengthMismatch):
        rmse([1.0, 2.0], [1.0])
    with pytest.raises(LengthMismatch):
        rmse([], [])


# --- rocauc ----------------------------------------------------------------------


def brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_rocauc_separated():
    assert rocauc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


def test_rocauc_all_ties():
    assert rocauc(np.full(6, 0.3), [0, 1, 0, 1, 1, 0]) == 0.5


def test_rocauc_small_oracle():
    scores, labels = [0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]
    assert rocauc(scores, labels) == 0.75 == brute_auc(scores, labels)


@pytest.mark.parametrize("seed", range(3))
def test_rocauc_equals_brute_force_with_ties(seed):
    rng = np.random.default_rng(seed)
    n = 1000
    scores = rng.integers(0, 40, size=n) / 40.0
    labels = rng.random(n) < 0.3
    assert rocauc(scores, labels) == pytest.approx(brute_auc(scores, labels), abs=1e-12)


def test_rocauc_single_class():
    with pytest.raises(SingleClass):
        rocauc([0.1, 0.2], [1, 1])


# --- convergence -------------------------------------------------------------------


def test_slope_recovers_power_law():
    dts = np.array([0.05, 0.1, 0.5, 1.0, 5.0])
    deltas = 2.0 + 0.3 * dts**0.64
    gamma, intercept, dropped = convergence_slope(dts, deltas, 2.0)
    assert gamma == pytest.approx(0.64, abs=1e-12) and intercept == pytest.approx(math.log(0.3), abs=1e-12)
    assert dropped == []


def test_slope_drops_points_below_reference():
    dts = np.array([0.05, 0.1, 0.5, 1.0])
    deltas = np.array([0.9, 1.0, 1.0 + 0.5**0.5, 2.0])
    with pytest.warns(UserWarning, match="dropping"):
        gamma, _, dropped = convergence_slope(dts, deltas, 1.0)
    assert dropped == [0.05, 0.1]
    assert gamma == pytest.approx(0.5, abs=1e-12)


def test_slope_needs_two_points():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(NegativeLogArgument):
            convergence_slope([0.1, 1.0], [0.5, 2.0], 1.0)


def test_coarse_windows_positions():
    values = np.arange(40.0)[None, :, None]
    w = coarse_windows(values, 30, 4, 10)
    assert w[0, :, 0].tolist() == [0.0, 10.0, 20.0, 30.0]


@pytest.fixture(scope="module")
def fine_paths():
    grid = make_time_grid(5.0, 1.0, 0.01)
    return simulate_paths(benchmark_sdde_spec(), benchmark_initial_path, grid, 5, 21)


def test_coarse_increments_are_sums_of_fine(fine_paths):
    inc = fine_paths.increments
    for kappa in (5, 10, 50, 100):
        coarse = aggregate_path_increments(inc, kappa)
        assert np.allclose(coarse, inc.reshape(5, -1, kappa, 2).sum(axis=2), atol=1e-15)
        assert np.allclose(coarse.sum(axis=1), inc.sum(axis=1), atol=1e-12)


def test_pure_noise_model_error_is_resolution_free(fine_paths):
    # zero drift and constant diffusion: every resolution ends at x0 + c * W(T), so
    # equal errors show that the coarse runs reuse the fine Brownian path
    model = DelaySdeNet.initialize(2, 4, 0.01, 1, TINY)
    for net in model.drift:
        net.a = np.zeros_like(net.a)
    for net in model.aleatoric:
        net.a = np.zeros_like(net.a)
        net.output_bias = 0.7
    errs = [terminal_error(model, fine_paths, k, 0.01) for k in (1, 5, 10, 50, 100)]
    assert np.allclose(errs, errs[0], rtol=1e-12)


def test_report_ordering_checks():
    rep = ConvergenceReport(1.0, [(5, 0.05, 1.1), (10, 0.1, 1.3), (50, 0.5, 1.2)], 0.5, 0.0)
    assert not rep.is_increasing() and rep.exceeds_reference()
    rep = ConvergenceReport(1.2, [(5, 0.05, 1.1), (10, 0.1, 1.3)], 0.5, 0.0)
    assert rep.is_increasing() and not rep.exceeds_reference()
    assert rep.to_csv().splitlines()[0] == "kappa,dt,delta"


@pytest.fixture(scope="module")
def tiny_study():
    cfg = ConvergenceConfig(n_paths=6, n_train=4, horizon=1.0, tau=3.0, kappas=(5, 10, 50, 100), train=TINY,
                            seeds=(0, 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return cfg, run_convergence_study(benchmark_sdde_spec(), cfg=cfg)[0]


def test_study_pools_squared_errors_over_seeds(tiny_study):
    _, rep = tiny_study
    assert rep.seeds == (0, 1) and len(rep.runs) == 2
    pool = lambda xs: math.sqrt(np.mean(np.square(xs)))
    assert rep.delta_ref == pytest.approx(pool([r.delta_ref for r in rep.runs]), rel=1e-14)
    for i, (k, dt, d) in enumerate(rep.deltas):
        assert d == pytest.approx(pool([r.deltas[i][2] for r in rep.runs]), rel=1e-14)
    assert len(rep.runs_csv().splitlines()) == 3


def test_study_seeds_are_independent(tiny_study):
    cfg, rep = tiny_study
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        single = run_convergence_study(benchmark_sdde_spec(), seeds=[1], cfg=cfg)[0]
    assert single.runs[0].delta_ref == rep.runs[1].delta_ref
    assert single.runs[0].deltas == rep.runs[1].deltas


def test_study_width_override(tiny_study):
    cfg, _ = tiny_study
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, models = run_convergence_study(benchmark_sdde_spec(), m=8, cfg=cfg)
    assert [m.drift[0].width for m in models] == [8, 8]


# --- comparison and N-step evaluation -----------------------------------------------


def small_compare(**kw):
    base = dict(n_paths=6, split=(4, 1, 1), tau=4.0, horizon=40.0, horizons=(1, 2), intervals=(), train=TINY)
    base.update(kw)
    return CompareConfig(**base)


def test_degenerate_compare_has_one_row_and_no_rocauc():
    rep = run_comparison(benchmark_sdde_spec(), small_compare(horizons=(1,), models=("delay",), ood_factor=0.0))
    assert len(rep.rows) == 1
    assert "rocauc" not in rep.to_csv().splitlines()[0].split(",")


def test_nstep_eval_matches_comparison_on_simulated_csv(tmp_path):
    cfg = small_compare()
    spec = benchmark_sdde_spec()
    ref = run_comparison(spec, cfg)
    paths = simulate_paths(spec, benchmark_initial_path, make_time_grid(cfg.tau, cfg.horizon, cfg.dt), cfg.n_paths,
                           cfg.seed)
    csv_path = tmp_path / "sim.csv"
    write_paths_csv(paths, csv_path)
    got = run_nstep_eval(csv_path, cfg)
    assert [(r.horizon, r.model) for r in got.rows] == [(r.horizon, r.model) for r in ref.rows]
    for a, b in zip(got.rows, ref.rows):
        assert a.value_rmse == pytest.approx(b.value_rmse, abs=1e-9)
        assert a.unc_rmse == pytest.approx(b.unc_rmse, abs=1e-9)


def test_series_pieces_keep_their_position(tmp_path):
    one = simulate_paths(benchmark_sdde_spec(), benchmark_initial_path, make_time_grid(4.0, 99.0, 1.0), 1, 3)
    csv_path = tmp_path / "series.csv"
    write_path_csv(one[0], csv_path)
    series = read_paths_csv(csv_path, tau=0.0)
    assert series.grid.times[0] == -4.0
    pieces = series_to_paths(series, (6, 2, 2), 4)
    full_times = series.grid.times
    for piece in pieces:
        t = piece.grid.times
        first = int(round(t[0] - full_times[0]))
        assert np.array_equal(t, full_times[first : first + len(t)])
        assert np.array_equal(piece.values[0], series.values[0, first : first + len(t)])
    # later pieces carry p - 1 = 3 initial points
    assert [p.grid.L for p in pieces[1:]] == [3, 3]
