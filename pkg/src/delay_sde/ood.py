"""Out-of-distribution data: soft Brownian offset, Gaussian offset, amplified
diffusion paths and interval contamination of a test set.

Distances are Euclidean on standardised window features ``[t, window]``
(each column z-scored with training statistics) so time and every lag and
coordinate are measured in comparable units.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import GuardUnsatisfiable
from .sdde import PathSet, SddeSpec, TimeGrid, rng_for, simulate_paths

BRUTE_FORCE_PAIRS = 10**7

# (year, first day, last day) of the replaced test intervals, years counted from 1
BENCHMARK_OOD_INTERVALS = (
    (1, 23, 25), (1, 313, 327), (3, 79, 91), (3, 344, 364), (4, 275, 294),
    (5, 67, 71), (8, 1, 5), (8, 190, 197), (9, 48, 52), (9, 323, 333),
)


@dataclass(frozen=True)
class SboConfig:
    d_minus: float
    d_plus: float
    noise_mean: float = 0.0
    noise_std: float = 1.0
    mode: str = "per-lag-noise"
    max_iters: int = 1000

    def __post_init__(self):
        if not self.d_minus > 0:
            raise ValueError("d_minus must be positive")
        if not self.d_plus > 0:
            raise ValueError("d_plus must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.mode not in ("per-lag-noise", "whole-window-shift"):
            raise ValueError("mode must be 'per-lag-noise' or 'whole-window-shift'")


@dataclass
class WindowScaler:
    """Column-wise z-scoring of flattened ``[t, window]`` features."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, times, windows) -> WindowScaler:
        z = flatten(times, windows)
        sd = z.std(axis=0)
        return cls(z.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def __call__(self, times, windows) -> np.ndarray:
        return (flatten(times, windows) - self.mean) / self.std


def flatten(times, windows) -> np.ndarray:
    windows = np.asarray(windows, dtype=float)
    return np.column_stack([np.asarray(times, dtype=float), windows.reshape(len(windows), -1)])


class NearestNeighbour:
    """Exact Euclidean nearest-neighbour distances to a fixed point set."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=float)
        self._tree = None

    def distance(self, q: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(q)
        if len(q) * len(self.points) <= BRUTE_FORCE_PAIRS:
            out = np.empty(len(q))
            for i0 in range(0, len(q), 256):
                blk = q[i0 : i0 + 256]
                d2 = ((blk[:, None, :] - self.points[None, :, :]) ** 2).sum(axis=2)
                out[i0 : i0 + 256] = np.sqrt(d2.min(axis=1))
            return out
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree.query(q, k=1)[0]


def median_nn_distance(points: np.ndarray, max_points: int = 5000, seed: int = 0) -> float:
    """Median distance from a training point to its nearest other training point."""
    pts = np.asarray(points, dtype=float)
    if len(pts) > max_points:
        pts = pts[rng_for(seed, 7).choice(len(pts), max_points, replace=False)]
    d, _ = cKDTree(pts).query(pts, k=2)
    return float(np.median(d[:, 1]))


def default_sbo_config(times, windows, seed: int = 0, **overrides) -> SboConfig:
    """``d_minus = sqrt(d*p) * median nn distance`` on standardised features; ``d_plus = d_minus / 2``."""
    windows = np.asarray(windows)
    z = WindowScaler.fit(times, windows)(times, windows)
    dp = windows.shape[1] * windows.shape[2]
    d_minus = np.sqrt(dp) * median_nn_distance(z, seed=seed)
    kw = {"d_minus": d_minus, "d_plus": d_minus / 2}
    kw.update(overrides)
    return SboConfig(**kw)


class MaxItersExceededWarning(UserWarning):
    """Some soft Brownian offset points never left the ``d_minus`` ball."""


@dataclass
class OodSet:
    times: np.ndarray
    windows: np.ndarray
    source: np.ndarray  # index of the training window each point started from
    n_failed: int = 0

    def __len__(self) -> int:
        return len(self.times)


def soft_brownian_offset(times, windows, cfg: SboConfig, n: int, seed: int, scaler: WindowScaler | None = None) -> OodSet:
    """Push ``n`` randomly drawn training windows away until each is at least ``d_minus`` from all of them.

    Offsets ``d_plus * e`` with ``e ~ N(noise_mean, noise_std)`` are added in
    standardised units to the state entries only; the time feature is kept.
    Point ``i`` uses its own stream ``(seed, i)``.  Points still too close
    after ``max_iters`` are dropped and counted (a MaxItersExceeded warning).
    """
    times = np.asarray(times, dtype=float)
    windows = np.asarray(windows, dtype=float)
    if len(times) == 0:
        raise ValueError("training set must be nonempty")
    p, d = windows.shape[1], windows.shape[2]
    scaler = scaler or WindowScaler.fit(times, windows)
    nn = NearestNeighbour(scaler(times, windows))
    start = rng_for(seed, 0).integers(0, len(times), size=n)
    z = scaler(times[start], windows[start])
    rngs = [rng_for(seed, 1, i) for i in range(n)]
    dist = np.zeros(n)
    active = np.arange(n)
    for _ in range(cfg.max_iters):
        if len(active) == 0:
            break
        for i in active:
            if cfg.mode == "per-lag-noise":
                e = rngs[i].normal(cfg.noise_mean, cfg.noise_std, size=p * d)
            else:
                e = np.tile(rngs[i].normal(cfg.noise_mean, cfg.noise_std, size=d), p)
            z[i, 1:] += cfg.d_plus * e
        dist[active] = nn.distance(z[active])
        active = active[dist[active] < cfg.d_minus]
    ok = dist >= cfg.d_minus
    n_failed = int(np.sum(~ok))
    if n_failed:
        warnings.warn(f"{n_failed} SBO points exceeded max_iters", MaxItersExceededWarning, stacklevel=2)
    x = z[ok] * scaler.std + scaler.mean
    return OodSet(x[:, 0], x[:, 1:].reshape(-1, p, d), start[ok], n_failed)


def gaussian_offset(times, windows, sigma: float, n: int, seed: int, scaler: WindowScaler | None = None) -> OodSet:
    """One-shot ``x + sigma * eps`` in standardised units; no distance guarantee."""
    times = np.asarray(times, dtype=float)
    windows = np.asarray(windows, dtype=float)
    p, d = windows.shape[1], windows.shape[2]
    if n == 0:
        return OodSet(np.empty(0), np.empty((0, p, d)), np.empty(0, int))
    scaler = scaler or WindowScaler.fit(times, windows)
    rng = rng_for(seed, 2)
    start = rng.integers(0, len(times), size=n)
    z = scaler(times[start], windows[start])
    z[:, 1:] += sigma * rng.standard_normal((n, p * d))
    x = z * scaler.std + scaler.mean
    return OodSet(x[:, 0], x[:, 1:].reshape(-1, p, d), start)


def amplified_diffusion_paths(spec: SddeSpec, factor: float, eta_gen, grid: TimeGrid, n: int, seed: int, threads: int = 1) -> PathSet:
    """Paths of the same system with every diffusion output multiplied by ``factor``."""
    if not factor > 0:
        raise ValueError("factor must be positive")
    return simulate_paths(spec.amplified(factor), eta_gen, grid, n, seed, threads=threads)


@dataclass
class ContaminatedSet:
    """Test paths with replaced intervals; ``mask`` marks replaced grid points."""

    paths: PathSet
    mask: np.ndarray  # (n_paths, n_points) bool
    sources: list  # per interval: (path, first index, source path, source offset)

    @property
    def contamination(self) -> float:
        return float(self.mask.mean())


GUARDS = ("every-point", "any-point")


def outside_envelope(seg: np.ndarray, lo: np.ndarray, hi: np.ndarray, guard: str = "every-point") -> bool:
    """Guard on a (length, d) segment against the training min-max envelope.

    ``every-point``: each time point has some coordinate outside ``[lo, hi]``;
    ``any-point``: at least one value anywhere is outside.
    """
    out = ((seg < lo) | (seg > hi)).any(axis=1)
    return bool(out.all() if guard == "every-point" else out.any())


def inject_ood_intervals(test: PathSet, ood: PathSet, intervals, train_values: np.ndarray,
                         seed: int = 0, max_tries: int = 200, day_offset: int = 1,
                         guard: str = "every-point") -> ContaminatedSet:
    """Replace ``(path, first_day, last_day)`` intervals of ``test`` with OOD path values.

    ``path`` counts from 1; day ``k`` is grid index ``k - day_offset + 1``
    (day 1 is ``t_1`` for the default offset).  A candidate segment from an
    OOD path must pass ``guard`` against the training envelope.  Same-time
    segments are tried first, then ``max_tries`` random offsets, then every
    offset in order.  Both coordinates are replaced.
    """
    if guard not in GUARDS:
        raise ValueError(f"guard must be one of {GUARDS}")
    vals = test.values.copy()
    mask = np.zeros(vals.shape[:2], dtype=bool)
    tv = np.asarray(train_values, dtype=float).reshape(-1, test.dim)
    lo, hi = tv.min(axis=0), tv.max(axis=0)
    rng = rng_for(seed, 3)
    L, npts = test.grid.L, test.grid.n_points
    sources = []
    for path, first, last in intervals:
        i = int(path) - 1
        a = L + int(first) - day_offset + 1
        b = L + int(last) - day_offset + 2
        if not (0 <= i < len(test) and 0 <= a < b <= npts):
            raise ValueError(f"interval {(path, first, last)} outside the test range")
        length = b - a
        n_off = ood.grid.n_points - length + 1

        def candidates():
            yield from ((j, a) for j in range(len(ood)) if a < n_off)
            for _ in range(max_tries):
                yield int(rng.integers(len(ood))), int(rng.integers(0, n_off))
            yield from ((j, off) for j in range(len(ood)) for off in range(n_off))

        for j, off in candidates():
            seg = ood.values[j, off : off + length]
            if outside_envelope(seg, lo, hi, guard):
                vals[i, a:b] = seg
                mask[i, a:b] = True
                sources.append((i, a, j, off))
                break
        else:
            raise GuardUnsatisfiable(f"no OOD segment leaves the training envelope for interval {(path, first, last)}")
    out = PathSet(test.grid, vals, test.increments, test.seeds)
    return ContaminatedSet(out, mask, sources)


def window_labels(contaminated: ContaminatedSet, p: int, N: int, include_target: bool = False) -> np.ndarray:
    """OOD label per window in ``build_windows`` order: any replaced input (and optionally target)."""
    from .model import window_starts

    g = contaminated.paths.grid
    s = np.asarray(window_starts(g.L, g.K, p, N)) + g.L
    idx = s[:, None] + np.arange(-p + 1, 1)[None, :]
    if include_target:
        idx = np.hstack([idx, (s + N)[:, None]])
    return contaminated.mask[:, idx].any(axis=2).ravel()
