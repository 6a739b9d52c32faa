"""Time grids, lag windows, Brownian increments and Euler-Maruyama simulation
of delay SDEs whose diffusion depends only on the initial segment.

Conventions used throughout the package:

* A grid runs over indices ``k = -L..K`` with ``t_k = k * dt``; ``L*dt = tau``,
  ``K*dt = T``.  Array position of grid index ``k`` is ``k + L``.
* The lag window used to produce ``X(t_k)`` is ``project(path, p, k)``: the
  ``p`` grid values ``X(t_{k-p}), ..., X(t_{k-1})``, oldest first.  The newest
  entry is the current state the Euler step starts from.
* Network features are ``[t, window.ravel()]`` where ``t`` is the time the
  step starts from (``t_{k-1}``) and each lag contributes ``d`` contiguous
  entries.
* Increments ``dW`` have variance ``dt`` and increment ``k`` drives the step
  ``t_{k-1} -> t_k``.  No noise enters the initial segment.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    GapTooLarge,
    InsufficientHistory,
    NonCommensurate,
    NotDivisible,
    NumericalBlowup,
)
from .shallow_net import Activation, TwoLayerNet

_TOL = 1e-9

# Gaussian draws: numpy Generator(PCG64(seed)).standard_normal, which uses the
# ziggurat method.  Per-path seeds come from SeedSequence([seed, index]) so a
# path's stream does not depend on how many other paths are simulated.
RNG_ALGORITHM = "numpy-PCG64/ziggurat"


def derive_seed(seed: int, *key: int) -> int:
    """64-bit child seed for a (seed, key...) pair."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in key]])
    return int(ss.generate_state(1, np.uint64)[0])


def rng_for(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *key) if key else seed))


@dataclass(frozen=True)
class TimeGrid:
    """Grid ``t_k = (k + origin) * dt`` for ``k = -L..K``.

    ``origin`` is nonzero only for pieces cut from a longer series, where
    local index 0 sits ``origin`` steps after the series start.
    """

    tau: float
    horizon: float
    dt: float
    L: int
    K: int
    origin: int = 0

    @property
    def n_points(self) -> int:
        return self.L + self.K + 1

    @property
    def times(self) -> np.ndarray:
        return (np.arange(-self.L, self.K + 1) + self.origin) * self.dt

    def pos(self, k: int) -> int:
        """Array position of grid index ``k``."""
        if not -self.L <= k <= self.K:
            raise IndexError(f"grid index {k} outside [-{self.L}, {self.K}]")
        return k + self.L

    def coarsen(self, kappa: int) -> TimeGrid:
        return make_time_grid(self.tau, self.horizon, self.dt * kappa)


def _as_int_multiple(x: float, dt: float, name: str) -> int:
    q = x / dt
    n = round(q)
    if abs(q - n) > _TOL * max(1.0, abs(q)):
        raise NonCommensurate(f"{name}={x} is not an integer multiple of dt={dt}")
    return int(n)


def make_time_grid(tau: float, horizon: float, dt: float) -> TimeGrid:
    if not dt > 0:
        raise ValueError("dt must be positive")
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    L = _as_int_multiple(tau, dt, "tau")
    K = _as_int_multiple(horizon, dt, "horizon")
    if K < 1:
        raise NonCommensurate("horizon must contain at least one step")
    return TimeGrid(float(tau), float(horizon), float(dt), L, K)


@dataclass(frozen=True)
class LagVector:
    entries: np.ndarray  # (p, d), oldest first
    t_ref: float

    @property
    def flat(self) -> np.ndarray:
        return self.entries.ravel()

    @property
    def p(self) -> int:
        return self.entries.shape[0]


@dataclass
class Path:
    grid: TimeGrid
    values: np.ndarray  # (L+K+1, d)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.shape[0] != self.grid.n_points:
            raise DimensionMismatch(
                f"path has {self.values.shape[0]} points, grid needs {self.grid.n_points}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("path values must be finite")

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def at(self, k: int) -> np.ndarray:
        return self.values[self.grid.pos(k)]

    @property
    def initial_segment(self) -> np.ndarray:
        return self.values[: self.grid.L + 1]


@dataclass
class BrownianIncrements:
    seed: int | None
    increments: np.ndarray  # (K, d), entry k-1 drives t_{k-1} -> t_k
    dt: float

    @property
    def K(self) -> int:
        return self.increments.shape[0]

    @property
    def dim(self) -> int:
        return self.increments.shape[1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["k", "j", "dW"])
            for k in range(self.K):
                for j in range(self.dim):
                    wr.writerow([k + 1, j + 1, repr(float(self.increments[k, j]))])

    @classmethod
    def from_csv(cls, path, dt: float, seed=None) -> BrownianIncrements:
        rows = list(csv.DictReader(open(path, newline="")))
        K = max(int(r["k"]) for r in rows)
        d = max(int(r["j"]) for r in rows)
        inc = np.empty((K, d))
        for r in rows:
            inc[int(r["k"]) - 1, int(r["j"]) - 1] = float(r["dW"])
        return cls(seed, inc, dt)


@dataclass
class PathSet:
    grid: TimeGrid
    values: np.ndarray  # (n, L+K+1, d)
    increments: np.ndarray | None = None  # (n, K, d)
    seeds: list | None = None  # per-path increment seeds

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3 or self.values.shape[1] != self.grid.n_points:
            raise DimensionMismatch("PathSet values must be (n, L+K+1, d)")

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i) -> Path:
        return Path(self.grid, self.values[i])

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def subset(self, idx) -> PathSet:
        idx = np.asarray(idx, dtype=int)
        inc = None if self.increments is None else self.increments[idx]
        seeds = None if self.seeds is None else [self.seeds[i] for i in idx]
        return PathSet(self.grid, self.values[idx], inc, seeds)

    def brownian(self, i: int) -> BrownianIncrements:
        if self.increments is None:
            raise ValueError("this PathSet carries no increments")
        seed = None if self.seeds is None else self.seeds[i]
        return BrownianIncrements(seed, self.increments[i], self.grid.dt)


def project(path: Path, p: int, k: int) -> LagVector:
    """Lag window ``(X(t_{k-p}), ..., X(t_{k-1}))`` feeding the step into ``t_k``."""
    if p < 1:
        raise ValueError("p must be positive")
    if k - p < -path.grid.L:
        raise InsufficientHistory(f"need {p} points before index {k}, grid starts at -{path.grid.L}")
    lo = path.grid.pos(k - p)
    return LagVector(path.values[lo : lo + p].copy(), float((k - 1) * path.grid.dt))


def lag_offsets(p: int, dt: float) -> np.ndarray:
    """Offsets of the window entries relative to the time being predicted."""
    return -np.arange(p, 0, -1) * dt


def sample_brownian(grid: TimeGrid, dim: int, seed: int) -> BrownianIncrements:
    rng = np.random.Generator(np.random.PCG64(seed))
    z = rng.standard_normal((grid.K, dim))
    return BrownianIncrements(seed, z * math.sqrt(grid.dt), grid.dt)


def aggregate_increments(fine: BrownianIncrements, kappa: int) -> BrownianIncrements:
    """Sum consecutive blocks of ``kappa`` fine increments (same Brownian path, coarser step)."""
    kappa = int(kappa)
    if kappa < 1 or fine.K % kappa:
        raise NotDivisible(f"K={fine.K} is not divisible by kappa={kappa}")
    inc = fine.increments.reshape(fine.K // kappa, kappa, fine.dim).sum(axis=1)
    return BrownianIncrements(fine.seed, inc, fine.dt * kappa)


def aggregate_path_increments(increments: np.ndarray, kappa: int) -> np.ndarray:
    """Vectorised ``aggregate_increments`` for an (n, K, d) stack."""
    n, K, d = increments.shape
    if kappa < 1 or K % kappa:
        raise NotDivisible(f"K={K} is not divisible by kappa={kappa}")
    return increments.reshape(n, K // kappa, kappa, d).sum(axis=2)


def linearize_initial(samples, grid: TimeGrid) -> np.ndarray:
    """Piecewise-linear interpolant of (time, value) samples on the grid points of [-tau, 0]."""
    times = np.asarray([s[0] for s in samples], dtype=float)
    vals = np.asarray([np.atleast_1d(s[1]) for s in samples], dtype=float)
    if np.any(np.diff(times) <= 0):
        raise ValueError("sample times must be strictly increasing")
    tg = grid.times[: grid.L + 1]
    eps = 1e-12 * max(1.0, grid.tau)
    if tg[0] < times[0] - eps or tg[-1] > times[-1] + eps:
        raise GapTooLarge("samples do not bracket every grid point of [-tau, 0]")
    tg = np.clip(tg, times[0], times[-1])
    return np.column_stack([np.interp(tg, times, vals[:, j]) for j in range(vals.shape[1])])


# --- the data-generating SDDE ---------------------------------------------


def features(t, windows: np.ndarray) -> np.ndarray:
    """``[t, window.ravel()]`` rows for a batch of (n, p, d) windows."""
    windows = np.asarray(windows, dtype=float)
    n = windows.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    return np.column_stack([t, windows.reshape(n, -1)])


@dataclass
class SddeSpec:
    dim: int
    lags: int
    drift_nets: list
    diff_nets: list
    diffusion_state_dependence: str = "initial-path-only"
    diffusion_scale: float = 1.0

    def __post_init__(self):
        n_in = 1 + self.dim * self.lags
        if len(self.drift_nets) != self.dim or len(self.diff_nets) != self.dim:
            raise DimensionMismatch("need one drift and one diffusion net per coordinate")
        for net in list(self.drift_nets) + list(self.diff_nets):
            if net.input_dim != n_in:
                raise DimensionMismatch(f"nets must take {n_in} inputs")
        if self.diffusion_state_dependence not in ("initial-path-only", "none"):
            raise ValueError("diffusion_state_dependence must be 'initial-path-only' or 'none'")

    def drift(self, t, windows) -> np.ndarray:
        x = features(t, windows)
        return np.column_stack([net(x) for net in self.drift_nets])

    def diffusion(self, t, windows) -> np.ndarray:
        windows = np.asarray(windows, dtype=float)
        if self.diffusion_state_dependence == "none":
            windows = np.zeros_like(windows)
        x = features(t, windows)
        return self.diffusion_scale * np.column_stack([net(x) for net in self.diff_nets])

    def amplified(self, factor: float) -> SddeSpec:
        if not factor > 0:
            raise ValueError("amplification factor must be positive")
        return replace(self, diffusion_scale=self.diffusion_scale * factor)


def benchmark_sdde_spec(alpha: float = 1.0, lam: float = 1.0, g1_time_weight: float = -5 / 365) -> SddeSpec:
    """The two-dimensional, four-lag test system with tanh drift and sigmoid diffusion.

    Weight rows are listed with the lag entries ordered newest first (as
    printed); they are permuted into this package's oldest-first layout.  All
    entries carry the 1e-2 factor except the time weight of the first
    diffusion net, which stays at -5/365 per day.
    """
    d, p = 2, 4
    rows = np.array(
        [
            [0, 3, 2, 2, 5, -3, 1, -3, -1],
            [0, 1, 0, -0.5, 0, -1, 0, -0.5, 0],
            [0, 0, 2, 0, -3, 0, 1, 0, 0],
            [0, 0, 1, 0, -0.5, 0, 0, 0, -0.5],
            [0, 0, 0, 0, 0, 0, 0, 0, 0],
            [0, 0, 0, 0, 0, 0, 0, 0, 1],
        ],
        dtype=float,
    ) * 1e-2
    rows[4, 0] = g1_time_weight
    # perm[new position] = printed position; printed lag 0 is the newest
    perm = np.empty(1 + d * p, dtype=int)
    for new_lag in range(p):
        printed_lag = p - 1 - new_lag
        for j in range(d):
            perm[1 + d * new_lag + j] = 1 + d * printed_lag + j
    perm[0] = 0
    rows = rows[:, perm]
    tanh = Activation("tanh", alpha)
    sig = Activation("sigmoid", lam)
    drift = [
        TwoLayerNet([5.0, 5.0], rows[0:2], [0.0, 0.0], tanh),
        TwoLayerNet([5.0, 5.0], rows[2:4], [0.0, 0.0], tanh),
    ]
    diff = [
        TwoLayerNet([4.0], rows[4:5], [0.0], sig),
        TwoLayerNet([1 / 8], rows[5:6], [1.0], sig),
    ]
    return SddeSpec(d, p, drift, diff)


def benchmark_initial_path(times: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """``eta(t) = [sin(z1 t), cos(z2 t)]`` with fresh ``z1, z2 ~ N(0, 1)``."""
    z = rng.standard_normal(2)
    return np.column_stack([np.sin(z[0] * times), np.cos(z[1] * times)])


def constant_initial_path(value) -> Callable:
    value = np.atleast_1d(np.asarray(value, dtype=float))

    def gen(times, rng):
        return np.tile(value, (len(times), 1))

    return gen


def _check_finite(x: np.ndarray, cap: float, k: int) -> None:
    if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > cap:
        raise NumericalBlowup(f"state magnitude exceeded {cap:g} at step {k}")


def euler_maruyama(
    spec: SddeSpec,
    initial: np.ndarray,
    increments: np.ndarray,
    grid: TimeGrid,
    blowup_cap: float = 1e12,
) -> np.ndarray:
    """Deterministic Euler-Maruyama recursion for a stack of paths.

    ``initial`` is (n, L+1, d) on the grid points of [-tau, 0]; ``increments``
    is (n, K, d).  Returns (n, L+K+1, d).
    """
    p, L, K, dt = spec.lags, grid.L, grid.K, grid.dt
    if L < p - 1:
        raise InsufficientHistory(f"tau/dt={L} too short for {p} lags")
    initial = np.asarray(initial, dtype=float)
    n, _, d = initial.shape
    if d != spec.dim or increments.shape != (n, K, d):
        raise DimensionMismatch("initial segment / increments do not match the system")
    out = np.empty((n, L + K + 1, d))
    out[:, : L + 1] = initial
    window0 = out[:, L + 1 - p : L + 1].copy()
    for k in range(K):
        # state at grid index k sits at position L + k
        t = k * dt
        window = out[:, L + k + 1 - p : L + k + 1]
        g = spec.diffusion(t, window0)
        nxt = out[:, L + k] + spec.drift(t, window) * dt + g * increments[:, k]
        _check_finite(nxt, blowup_cap, k + 1)
        out[:, L + k + 1] = nxt
    return out


def simulate_paths(
    spec: SddeSpec,
    eta_gen: Callable,
    grid: TimeGrid,
    n: int,
    seed: int,
    blowup_cap: float = 1e12,
    threads: int = 1,
) -> PathSet:
    """Simulate ``n`` independent paths.

    Path ``i`` draws its initial segment from stream ``(seed, i, 0)`` and its
    increments from the 64-bit seed ``derive_seed(seed, i, 1)`` (kept on the
    result so the Brownian path can be reused).
    """
    tg = grid.times[: grid.L + 1]
    seeds = [derive_seed(seed, i, 1) for i in range(n)]
    initial = np.stack([np.asarray(eta_gen(tg, rng_for(seed, i, 0)), dtype=float) for i in range(n)])
    if initial.ndim == 2:
        initial = initial[:, :, None]
    inc = np.stack([sample_brownian(grid, spec.dim, s).increments for s in seeds])
    if threads <= 1 or n < 2:
        values = euler_maruyama(spec, initial, inc, grid, blowup_cap)
    else:
        chunks = np.array_split(np.arange(n), min(threads, n))
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda idx: euler_maruyama(spec, initial[idx], inc[idx], grid, blowup_cap), chunks))
        values = np.concatenate(parts, axis=0)
    return PathSet(grid, values, inc, seeds)


# --- CSV ----------------------------------------------------------------


def write_paths_csv(paths: PathSet, path, long: bool = True) -> None:
    """Long format: ``path_id,t,x1..xd``; one row per grid point per path."""
    d = paths.dim
    times = paths.grid.times
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        header = ["path_id", "t"] if long else ["t"]
        wr.writerow(header + [f"x{j + 1}" for j in range(d)])
        for i in range(len(paths)):
            for r, t in enumerate(times):
                row = [repr(float(t))] + [repr(float(v)) for v in paths.values[i, r]]
                wr.writerow(([i] if long else []) + row)


def write_path_csv(p: Path, path) -> None:
    write_paths_csv(PathSet(p.grid, p.values[None]), path, long=False)


def read_table(path) -> tuple[list[str], dict]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        cols = {h: [] for h in header}
        for row in rd:
            for h, v in zip(header, row):
                cols[h].append(v)
    return header, cols


def read_paths_csv(path, tau: float | None = None) -> PathSet:
    """Read the long (or single-path) CSV back into a PathSet.

    The grid is recovered from the ``t`` column: ``t <= 0`` rows form the
    initial segment.
    """
    from .errors import MissingColumns, NonUniformSampling

    header, cols = read_table(path)
    if "t" not in header:
        raise MissingColumns("path CSV needs a 't' column")
    xcols = [h for h in header if h.startswith("x")]
    if not xcols:
        raise MissingColumns("path CSV needs x1..xd columns")
    t = np.array([float(v) for v in cols["t"]])
    x = np.column_stack([[float(v) for v in cols[h]] for h in xcols])
    ids = np.array([int(v) for v in cols["path_id"]]) if "path_id" in header else np.zeros(len(t), int)
    uniq = list(dict.fromkeys(ids.tolist()))
    t0 = t[ids == uniq[0]]
    steps = np.diff(t0)
    if len(steps) == 0 or np.max(np.abs(steps - steps[0])) > 1e-9 * max(1.0, abs(steps[0])):
        raise NonUniformSampling("time column is not equidistant")
    dt = float(steps[0])
    first = _as_int_multiple(float(t0[0]), dt, "first time")
    L = max(0, -first) if tau is None else _as_int_multiple(tau, dt, "tau")
    K = len(t0) - 1 - L
    if K < 1:
        raise NonCommensurate("series too short for the requested initial segment")
    grid = TimeGrid(L * dt, K * dt, dt, L, K, first + L)
    vals = np.stack([x[ids == i] for i in uniq])
    return PathSet(grid, vals)
