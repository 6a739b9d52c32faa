import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delay_sde.errors import (
    DimensionMismatch,
    GapTooLarge,
    InsufficientHistory,
    NonCommensurate,
    NotDivisible,
    NumericalBlowup,
)
from delay_sde.sdde import (
    BrownianIncrements,
    Path,
    PathSet,
    SddeSpec,
    aggregate_increments,
    aggregate_path_increments,
    benchmark_initial_path,
    benchmark_sdde_spec,
    constant_initial_path,
    derive_seed,
    euler_maruyama,
    lag_offsets,
    linearize_initial,
    make_time_grid,
    project,
    read_paths_csv,
    sample_brownian,
    simulate_paths,
    write_paths_csv,
)
from delay_sde.shallow_net import Activation, TwoLayerNet


def linear_spec(A, p=1, d=1, g=0.0):
    """Spec whose drift is exactly linear in the newest lag (relu of +-x pairs) and diffusion constant."""
    n_in = 1 + d * p
    drift = []
    for j in range(d):
        w = np.zeros((2 * d, n_in))
        a = np.zeros(2 * d)
        for i in range(d):
            w[2 * i, 1 + d * (p - 1) + i] = 1.0
            w[2 * i + 1, 1 + d * (p - 1) + i] = -1.0
            a[2 * i], a[2 * i + 1] = A[j][i], -A[j][i]
        drift.append(TwoLayerNet(a, w, np.zeros(2 * d), Activation("relu")))
    # sigmoid(0) = 1/2 so a = 2g gives a constant diffusion g
    diff = [TwoLayerNet([2 * g], np.zeros((1, n_in)), [0.0], Activation("sigmoid")) for _ in range(d)]
    return SddeSpec(d, p, drift, diff)


# --- grids ------------------------------------------------------------------


@pytest.mark.parametrize("tau,T,dt,L,K", [(15, 5, 0.01, 1500, 500), (4, 365, 1, 4, 365), (0, 1, 0.5, 0, 2)])
def test_make_time_grid_examples(tau, T, dt, L, K):
    g = make_time_grid(tau, T, dt)
    assert (g.L, g.K) == (L, K)
    assert g.times[0] == pytest.approx(-tau) and g.times[-1] == pytest.approx(T)


def test_make_time_grid_rejects_noncommensurate():
    with pytest.raises(NonCommensurate):
        make_time_grid(1.0, 1.05, 0.1)
    with pytest.raises(NonCommensurate):
        make_time_grid(0.25, 1.0, 0.1)


@given(st.integers(0, 50), st.integers(1, 50), st.sampled_from([0.01, 0.1, 0.25, 1.0]))
@settings(max_examples=60, deadline=None)
def test_grid_strictly_increasing_and_equidistant(L, K, dt):
    g = make_time_grid(L * dt, K * dt, dt)
    steps = np.diff(g.times)
    assert (g.L, g.K) == (L, K)
    assert np.all(steps > 0) and np.allclose(steps, dt, rtol=0, atol=1e-12)


# --- projection ---------------------------------------------------------------


def test_project_constant_path():
    g = make_time_grid(4, 10, 1)
    lv = project(Path(g, np.full(g.n_points, 2.5)), 4, 3)
    assert np.all(lv.flat == 2.5) and lv.p == 4


def test_project_reads_previous_points():
    g = make_time_grid(3, 3, 1)
    vals = np.zeros(g.n_points)
    vals[g.pos(1)], vals[g.pos(2)] = 1.0, 2.0
    assert project(Path(g, vals), 2, 3).flat.tolist() == [1.0, 2.0]


def test_lag_offsets_daily():
    assert lag_offsets(4, 1.0).tolist() == [-4.0, -3.0, -2.0, -1.0]


def test_project_insufficient_history():
    g = make_time_grid(2, 5, 1)
    with pytest.raises(InsufficientHistory):
        project(Path(g, np.zeros(g.n_points)), 4, 1)


@given(st.integers(-1, 6))
@settings(max_examples=20, deadline=None)
def test_projection_shifts_one_index_per_step(k):
    g = make_time_grid(4, 8, 1)
    vals = np.arange(g.n_points, dtype=float)
    a, b = project(Path(g, vals), 3, k), project(Path(g, vals), 3, k + 1)
    assert np.array_equal(b.flat, a.flat + 1)


# --- Brownian increments ----------------------------------------------------------


def test_sample_brownian_variance_within_three_standard_errors():
    g = make_time_grid(0, 5, 0.01)
    inc = sample_brownian(g, 2, seed=12345).increments
    assert inc.shape == (500, 2)
    # the sample variance of n normals has standard error dt * sqrt(2/n)
    n = inc.size
    assert abs(np.mean(inc**2) - 0.01) < 3 * 0.01 * np.sqrt(2 / n)


def test_sample_brownian_deterministic_and_minimal():
    g = make_time_grid(0, 1, 1)
    a, b = sample_brownian(g, 1, 7), sample_brownian(g, 1, 7)
    assert a.increments.shape == (1, 1)
    assert np.array_equal(a.increments, b.increments)


def test_aggregate_increments_examples():
    fine = BrownianIncrements(0, np.array([[0.1], [-0.3], [0.2], [0.4]]), 0.25)
    coarse = aggregate_increments(fine, 2)
    assert np.allclose(coarse.increments.ravel(), [-0.2, 0.6], atol=1e-15)
    assert coarse.dt == 0.5
    assert np.array_equal(aggregate_increments(fine, 1).increments, fine.increments)


def test_aggregate_to_single_step_is_total_sum():
    fine = sample_brownian(make_time_grid(0, 5, 0.01), 2, 3)
    one = aggregate_increments(fine, 500)
    assert one.increments.shape == (1, 2)
    assert np.allclose(one.increments[0], fine.increments.sum(axis=0), atol=1e-12)


def test_aggregate_total_is_normal_with_variance_T():
    # over many seeds the single coarse increment has variance T
    g = make_time_grid(0, 5, 0.05)
    totals = np.array([aggregate_increments(sample_brownian(g, 1, s), 100).increments[0, 0] for s in range(2000)])
    assert abs(totals.var() - 5.0) < 3 * 5.0 * np.sqrt(2 / len(totals))


def test_aggregate_rejects_non_divisor():
    fine = sample_brownian(make_time_grid(0, 1, 0.1), 1, 0)
    with pytest.raises(NotDivisible):
        aggregate_increments(fine, 3)


def test_vectorised_aggregation_matches_scalar():
    inc = np.random.default_rng(0).normal(size=(3, 20, 2))
    stacked = aggregate_path_increments(inc, 5)
    for i in range(3):
        single = aggregate_increments(BrownianIncrements(None, inc[i], 0.1), 5).increments
        assert np.array_equal(stacked[i], single)


def test_brownian_csv_roundtrip(tmp_path):
    b = sample_brownian(make_time_grid(0, 2, 0.5), 2, 11)
    b.to_csv(tmp_path / "dw.csv")
    back = BrownianIncrements.from_csv(tmp_path / "dw.csv", 0.5, 11)
    assert np.array_equal(back.increments, b.increments)


# --- simulation ------------------------------------------------------------------


def test_frozen_dynamics():
    g = make_time_grid(2, 10, 0.5)
    spec = linear_spec([[0.0]], p=2)
    ps = simulate_paths(spec, constant_initial_path(3.0), g, 3, seed=0)
    assert np.all(ps.values == 3.0)


def test_deterministic_euler_constant_drift():
    g = make_time_grid(0, 1, 0.5)
    # f = 1: one relu unit on a constant input is not available, so use a sigmoid with zero weights
    drift = [TwoLayerNet([2.0], np.zeros((1, 2)), [0.0], Activation("sigmoid"))]
    diff = [TwoLayerNet([0.0], np.zeros((1, 2)), [0.0], Activation("sigmoid"))]
    ps = simulate_paths(SddeSpec(1, 1, drift, diff), constant_initial_path(0.0), g, 1, seed=0)
    assert ps.values[0, -1, 0] == pytest.approx(1.0, abs=1e-15)


def test_linear_drift_matches_exact_recursion():
    g = make_time_grid(0, 2, 0.1)
    lam = -0.7
    ps = simulate_paths(linear_spec([[lam]]), constant_initial_path(1.5), g, 1, seed=0)
    expected = 1.5 * (1 + lam * 0.1) ** np.arange(g.K + 1)
    assert np.allclose(ps.values[0, :, 0], expected, rtol=1e-14, atol=0)


def test_noise_enters_with_given_increments():
    g = make_time_grid(0, 1, 0.25)
    ps = simulate_paths(linear_spec([[0.0]], g=0.5), constant_initial_path(0.0), g, 2, seed=4)
    assert np.allclose(ps.values[:, 1:, 0], 0.5 * np.cumsum(ps.increments[:, :, 0], axis=1), atol=1e-15)
    for i in range(2):
        assert np.array_equal(ps.brownian(i).increments, sample_brownian(g, 1, ps.seeds[i]).increments)


def test_simulation_reproducible_and_order_insensitive():
    g = make_time_grid(4, 30, 1)
    spec = benchmark_sdde_spec()
    a = simulate_paths(spec, benchmark_initial_path, g, 5, seed=9)
    b = simulate_paths(spec, benchmark_initial_path, g, 5, seed=9)
    c = simulate_paths(spec, benchmark_initial_path, g, 3, seed=9)
    assert np.array_equal(a.values, b.values)
    assert np.array_equal(a.values[:3], c.values)


def test_threads_do_not_change_paths():
    g = make_time_grid(4, 30, 1)
    spec = benchmark_sdde_spec()
    a = simulate_paths(spec, benchmark_initial_path, g, 6, seed=1, threads=1)
    b = simulate_paths(spec, benchmark_initial_path, g, 6, seed=1, threads=3)
    assert np.array_equal(a.values, b.values)


def test_blowup_is_reported():
    g = make_time_grid(0, 50, 1)
    with pytest.raises(NumericalBlowup):
        simulate_paths(linear_spec([[5.0]]), constant_initial_path(1.0), g, 1, seed=0, blowup_cap=1e6)


def test_benchmark_system_year_looks_reasonable():
    g = make_time_grid(4, 365, 1)
    ps = simulate_paths(benchmark_sdde_spec(), benchmark_initial_path, g, 20, seed=0)
    x1 = ps.values[:, :, 0]
    assert np.all(np.isfinite(ps.values))
    # first coordinate wanders over a few units to about ten over a year
    assert 3 < np.median(np.abs(x1).max(axis=1)) < 30


def test_benchmark_spec_weight_layout():
    spec = benchmark_sdde_spec()
    # newest-lag weights of f1 are the first printed lag (3, 2) * 1e-2
    w = spec.drift_nets[0].w[0]
    assert w[-2:].tolist() == pytest.approx([0.03, 0.02])
    assert w[1:3].tolist() == pytest.approx([-0.03, -0.01])
    assert spec.diff_nets[0].w[0, 0] == pytest.approx(-5 / 365)


def test_amplified_spec_scales_diffusion_only():
    spec = benchmark_sdde_spec()
    amp = spec.amplified(2.5)
    t, w = np.array([0.0, 100.0]), np.random.default_rng(0).normal(size=(2, 4, 2))
    assert np.allclose(amp.diffusion(t, w), 2.5 * spec.diffusion(t, w))
    assert np.array_equal(amp.drift(t, w), spec.drift(t, w))


def test_euler_rejects_mismatched_increments():
    g = make_time_grid(0, 2, 1)
    with pytest.raises(DimensionMismatch):
        euler_maruyama(linear_spec([[0.0]]), np.zeros((1, 1, 1)), np.zeros((1, 3, 1)), g)


# --- initial segments --------------------------------------------------------------


def test_linearize_identity_on_grid():
    g = make_time_grid(2, 1, 0.5)
    samples = [(t, np.sin(t)) for t in g.times[: g.L + 1]]
    assert np.allclose(linearize_initial(samples, g)[:, 0], np.sin(g.times[: g.L + 1]), atol=0)


def test_linearize_midpoint():
    g = make_time_grid(1, 1, 0.5)
    assert linearize_initial([(-1.0, 0.0), (0.0, 2.0)], g)[:, 0].tolist() == [0.0, 1.0, 2.0]


def test_linearize_quadratic_error_bound():
    h = 0.3
    g = make_time_grid(6, 1, 0.01)
    ts = np.arange(-6.0, 0.0 + 1e-9, h)
    ts[-1] = 0.0
    approx = linearize_initial([(t, t * t) for t in ts], g)[:, 0]
    exact = g.times[: g.L + 1] ** 2
    # linear interpolation error is at most max|f''| h^2 / 8, and f'' = 2 here
    err = np.max(np.abs(approx - exact))
    assert err <= 2 * h * h / 8 + 1e-12
    assert err > 0.9 * 2 * h * h / 8  # the bound is attained at midpoints on this grid


def test_linearize_gap():
    g = make_time_grid(2, 1, 0.5)
    with pytest.raises(GapTooLarge):
        linearize_initial([(-1.0, 0.0), (0.0, 1.0)], g)


# --- CSV ---------------------------------------------------------------------------


def test_paths_csv_roundtrip(tmp_path):
    g = make_time_grid(4, 20, 1)
    ps = simulate_paths(benchmark_sdde_spec(), benchmark_initial_path, g, 3, seed=2)
    write_paths_csv(ps, tmp_path / "p.csv")
    back = read_paths_csv(tmp_path / "p.csv")
    assert back.grid == g
    assert np.array_equal(back.values, ps.values)


def test_derive_seed_distinguishes_keys():
    assert derive_seed(0, 1, 2) != derive_seed(0, 2, 1)
    assert derive_seed(5, 3) == derive_seed(5, 3)


def test_pathset_requires_full_grid():
    g = make_time_grid(1, 2, 1)
    with pytest.raises(DimensionMismatch):
        PathSet(g, np.zeros((1, 3, 1)))
