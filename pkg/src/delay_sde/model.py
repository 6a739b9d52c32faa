"""The delay SDE network: drift, aleatoric and epistemic nets trained in sequence.

Residual sign convention: ``e = x_hat - x`` (prediction minus observation).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm as _gauss

from .errors import Divergence, InsufficientHistory, PathTooShort
from .sdde import PathSet, derive_seed, rng_for
from .shallow_net import Activation, SgdConfig, TwoLayerNet, init_net, sgd_step, sigmoid

# --- supervised windows -----------------------------------------------------


@dataclass
class SupervisedWindowSet:
    """Rows of (time of newest input, lag window, target ``N`` steps ahead).

    ``windows`` is (n, p, d) oldest first, ``times`` holds ``t_k`` of the
    newest input and ``targets`` the observation at ``t_k + N*dt``.
    """

    times: np.ndarray
    windows: np.ndarray
    targets: np.ndarray
    dt: float
    horizon: int
    path_index: np.ndarray
    start_index: np.ndarray  # grid index of the newest input, counted from the series start
    split: str = "train"

    def __len__(self) -> int:
        return len(self.times)

    @property
    def p(self) -> int:
        return self.windows.shape[1]

    @property
    def dim(self) -> int:
        return self.windows.shape[2]

    def subset(self, idx) -> SupervisedWindowSet:
        idx = np.asarray(idx)
        return SupervisedWindowSet(
            self.times[idx], self.windows[idx], self.targets[idx], self.dt, self.horizon,
            self.path_index[idx], self.start_index[idx], self.split,
        )

    @classmethod
    def concat(cls, sets) -> SupervisedWindowSet:
        sets = list(sets)
        first = sets[0]
        return cls(
            np.concatenate([s.times for s in sets]),
            np.concatenate([s.windows for s in sets]),
            np.concatenate([s.targets for s in sets]),
            first.dt, first.horizon,
            np.concatenate([s.path_index for s in sets]),
            np.concatenate([s.start_index for s in sets]),
            first.split,
        )

    def to_csv(self, path, is_ood=None) -> None:
        import csv

        n, p, d = self.windows.shape
        cols = ["path_id", "t"] + [f"x{j + 1}_lag{p - 1 - i}" for i in range(p) for j in range(d)]
        cols += [f"y{j + 1}" for j in range(d)]
        if is_ood is not None:
            cols.append("is_ood")
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(cols)
            for r in range(n):
                row = [int(self.path_index[r]), repr(float(self.times[r]))]
                row += [repr(float(v)) for v in self.windows[r].ravel()]
                row += [repr(float(v)) for v in self.targets[r]]
                if is_ood is not None:
                    row.append(int(bool(is_ood[r])))
                wr.writerow(row)


def window_starts(L: int, K: int, p: int, N: int) -> range:
    """Admissible grid indices ``s`` of the newest input: ``s-p+1 >= -L``, ``s >= 0``, ``s+N <= K``."""
    return range(max(0, p - 1 - L), K - N + 1)


def build_windows(paths: PathSet, p: int, N: int, split=None, path_ids=None):
    """All admissible windows of every path, in path then time order.

    ``split`` may be ``None`` (one set tagged "train"), a mapping of split
    name to a fraction, or a mapping of split name to a list of path indices.
    Splitting is by path, never by window.
    """
    grid = paths.grid
    starts = window_starts(grid.L, grid.K, p, N)
    if len(starts) == 0:
        raise PathTooShort(f"paths with L={grid.L}, K={grid.K} admit no window for p={p}, N={N}")
    s = np.asarray(starts)
    times = (s + grid.origin) * grid.dt
    ids = np.arange(len(paths)) if path_ids is None else np.asarray(path_ids)

    def make(idx, tag):
        idx = np.asarray(idx, dtype=int)
        if len(idx) == 0:
            raise PathTooShort(f"split {tag!r} received no paths")
        pos = s + grid.L
        win_pos = pos[:, None] + np.arange(-p + 1, 1)[None, :]
        windows = paths.values[idx][:, win_pos]  # (np, nw, p, d)
        targets = paths.values[idx][:, pos + N]
        npaths, nw = len(idx), len(s)
        return SupervisedWindowSet(
            np.tile(times, npaths),
            windows.reshape(npaths * nw, p, paths.dim),
            targets.reshape(npaths * nw, paths.dim),
            grid.dt, N,
            np.repeat(ids[idx], nw),
            np.tile(s + grid.origin, npaths),
            tag,
        )

    if split is None:
        return make(np.arange(len(paths)), "train")
    out = {}
    values = list(split.values())
    if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
        counts = split_counts(len(paths), split)
        start = 0
        for name, c in counts.items():
            out[name] = make(np.arange(start, start + c), name)
            start += c
    else:
        for name, idx in split.items():
            out[name] = make(idx, name)
    return out


def split_counts(n: int, fractions: dict) -> dict:
    """Largest-remainder rounding of ``n`` items into named fractions."""
    names = list(fractions)
    w = np.array([float(fractions[k]) for k in names])
    raw = n * w / w.sum()
    base = np.floor(raw).astype(int)
    order = np.argsort(-(raw - base), kind="stable")
    for i in order[: n - base.sum()]:
        base[i] += 1
    return dict(zip(names, base.tolist()))


# --- normalisation ----------------------------------------------------------


@dataclass
class Normalizer:
    t_mean: float
    t_std: float
    x_mean: np.ndarray
    x_std: np.ndarray

    @classmethod
    def fit(cls, ws: SupervisedWindowSet) -> Normalizer:
        t_std = float(np.std(ws.times))
        x = ws.windows.reshape(-1, ws.dim)
        x_std = np.std(x, axis=0)
        return cls(
            float(np.mean(ws.times)),
            t_std if t_std > 0 else 1.0,
            np.mean(x, axis=0),
            np.where(x_std > 0, x_std, 1.0),
        )

    @classmethod
    def identity(cls, d: int) -> Normalizer:
        return cls(0.0, 1.0, np.zeros(d), np.ones(d))

    def features(self, t, windows) -> np.ndarray:
        windows = np.asarray(windows, dtype=float)
        n = windows.shape[0]
        tt = (np.broadcast_to(np.asarray(t, dtype=float), (n,)) - self.t_mean) / self.t_std
        z = (windows - self.x_mean) / self.x_std
        return np.column_stack([tt, z.reshape(n, -1)])

    def window_adjoint(self, dz: np.ndarray, p: int) -> np.ndarray:
        """Map dL/d(features) back to dL/d(window)."""
        n = dz.shape[0]
        return dz[:, 1:].reshape(n, p, -1) / self.x_std

    def to_dict(self):
        return {"t_mean": self.t_mean, "t_std": self.t_std,
                "x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["t_mean"], d["t_std"], np.array(d["x_mean"]), np.array(d["x_std"]))


# --- configuration ----------------------------------------------------------


@dataclass
class TrainConfig:
    width: int = 32
    drift_activation: str = "tanh"
    aleatoric_activation: str = "tanh"
    epistemic_activation: str = "tanh"
    activation_param: float = 1.0
    drift: SgdConfig = field(default_factory=lambda: SgdConfig(0.01, 0.9, 5e-5, 500))
    aleatoric: SgdConfig = field(default_factory=lambda: SgdConfig(0.001, 0.9, 5e-5, 500))
    epistemic: SgdConfig = field(default_factory=lambda: SgdConfig(0.005, 0.9, 5e-5, 20))
    validate_every: int = 0
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("drift", "aleatoric", "epistemic"):
            if k in d and isinstance(d[k], dict):
                d[k] = SgdConfig(**d[k])
        return cls(**d)


# --- the model --------------------------------------------------------------


def _flatten(nets) -> np.ndarray:
    return np.concatenate([n.flat() for n in nets])


def _unflatten(nets, theta) -> list:
    out, i = [], 0
    for n in nets:
        out.append(n.with_flat(theta[i : i + n.n_params]))
        i += n.n_params
    return out


@dataclass
class StageState:
    """Resumable optimiser state of one training stage."""

    theta: np.ndarray
    velocity: np.ndarray
    iterations: int
    losses: list = field(default_factory=list)
    best_theta: np.ndarray | None = None
    best_loss: float = math.inf
    best_iteration: int = -1

    @property
    def selected(self) -> np.ndarray:
        """Parameters with the lowest validation loss, else the final ones."""
        return self.theta if self.best_theta is None else self.best_theta

    def to_dict(self):
        return {"theta": self.theta.tolist(), "velocity": self.velocity.tolist(),
                "iterations": self.iterations, "losses": list(self.losses),
                "best_theta": None if self.best_theta is None else self.best_theta.tolist(),
                "best_loss": self.best_loss if math.isfinite(self.best_loss) else None,
                "best_iteration": self.best_iteration}

    @classmethod
    def from_dict(cls, d):
        bt = d.get("best_theta")
        bl = d.get("best_loss")
        return cls(np.array(d["theta"], dtype=float), np.array(d["velocity"], dtype=float),
                   int(d["iterations"]), list(d.get("losses", [])),
                   None if bt is None else np.array(bt, dtype=float),
                   math.inf if bl is None else float(bl), int(d.get("best_iteration", -1)))


@dataclass
class DelaySdeNet:
    dim: int
    lags: int
    dt: float
    horizon: int
    drift: list
    aleatoric: list
    epistemic: TwoLayerNet
    normalizer: Normalizer
    drift_scale: np.ndarray
    aleatoric_scale: np.ndarray
    sigma_e: float = 0.0
    config: dict = field(default_factory=dict)
    states: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, dim, lags, dt, horizon, cfg: TrainConfig, normalizer=None) -> DelaySdeNet:
        n_in = 1 + dim * lags
        act = lambda kind: Activation(kind, cfg.activation_param)
        drift = [init_net(n_in, cfg.width, act(cfg.drift_activation), rng_for(cfg.seed, 1, j)) for j in range(dim)]
        aleat = [init_net(n_in, cfg.width, act(cfg.aleatoric_activation), rng_for(cfg.seed, 2, j)) for j in range(dim)]
        epi = init_net(n_in, cfg.width, act(cfg.epistemic_activation), rng_for(cfg.seed, 3, 0), output_bias=True)
        return cls(
            dim, lags, float(dt), int(horizon), drift, aleat, epi,
            normalizer or Normalizer.identity(dim), np.ones(dim), np.ones(dim),
            0.0, {"train": cfg.to_dict()}, {},
        )

    # -- evaluation --

    def drift_value(self, t, windows) -> np.ndarray:
        z = self.normalizer.features(t, windows)
        return np.column_stack([s * net(z) for s, net in zip(self.drift_scale, self.drift)])

    def aleatoric_raw(self, t, windows) -> np.ndarray:
        z = self.normalizer.features(t, windows)
        return np.column_stack([s * net(z) for s, net in zip(self.aleatoric_scale, self.aleatoric)])

    def aleatoric_std(self, t, windows) -> np.ndarray:
        """``|g_a|``; the per-step variance is ``g_a**2 * dt``."""
        return np.abs(self.aleatoric_raw(t, windows))

    def epistemic_prob(self, t, windows) -> np.ndarray:
        z = self.normalizer.features(t, windows)
        return sigmoid(self.epistemic(z))

    def accumulated_variance(self, t, windows, n_steps: int) -> np.ndarray:
        """``V * dt`` with ``V = sum_{i<n} g_a(t + i dt, window)**2`` (window held fixed)."""
        windows = np.asarray(windows, dtype=float)
        acc = np.zeros((windows.shape[0], self.dim))
        for i in range(n_steps):
            acc += self.aleatoric_raw(np.asarray(t) + i * self.dt, windows) ** 2
        return acc * self.dt

    def rollout(self, t, windows, n_steps: int) -> np.ndarray:
        """Deterministic Euler rollout; returns (n, n_steps, d) predicted states."""
        return _rollout(self.drift, self.normalizer, self.drift_scale, t, windows, self.dt, n_steps)[0]

    def simulate(self, t0, initial_windows, increments, fixed_windows=None) -> np.ndarray:
        """Euler-Maruyama path of the fitted model driven by given increments.

        ``increments`` is (n, K, d) with variance ``dt`` each; the diffusion
        ``|g_a| + sigma_e * prob`` is evaluated on the window at the start
        (the model's diffusion only sees the initial segment).
        """
        windows = np.array(initial_windows, dtype=float)
        n, K, d = increments.shape
        base = windows.copy() if fixed_windows is None else np.asarray(fixed_windows, dtype=float)
        prob = self.epistemic_prob(t0, base) if self.sigma_e else np.zeros(n)
        out = np.empty((n, K, d))
        for k in range(K):
            t = t0 + k * self.dt
            g = self.aleatoric_std(t, base) + self.sigma_e * prob[:, None]
            nxt = windows[:, -1] + self.drift_value(t, windows) * self.dt + g * increments[:, k]
            out[:, k] = nxt
            windows = np.concatenate([windows[:, 1:], nxt[:, None]], axis=1)
        return out

    # -- persistence --

    def to_dict(self) -> dict:
        return {
            "dim": self.dim, "lags": self.lags, "dt": self.dt, "horizon": self.horizon,
            "sigma_e": self.sigma_e,
            "drift": [n.to_dict() for n in self.drift],
            "aleatoric": [n.to_dict() for n in self.aleatoric],
            "epistemic": self.epistemic.to_dict(),
            "normalizer": self.normalizer.to_dict(),
            "drift_scale": self.drift_scale.tolist(),
            "aleatoric_scale": self.aleatoric_scale.tolist(),
            "config": self.config,
            "states": {k: v.to_dict() for k, v in self.states.items()},
        }

    @classmethod
    def from_dict(cls, d) -> DelaySdeNet:
        return cls(
            d["dim"], d["lags"], d["dt"], d["horizon"],
            [TwoLayerNet.from_dict(n) for n in d["drift"]],
            [TwoLayerNet.from_dict(n) for n in d["aleatoric"]],
            TwoLayerNet.from_dict(d["epistemic"]),
            Normalizer.from_dict(d["normalizer"]),
            np.array(d["drift_scale"], dtype=float),
            np.array(d["aleatoric_scale"], dtype=float),
            d["sigma_e"], d.get("config", {}),
            {k: StageState.from_dict(v) for k, v in d.get("states", {}).items()},
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> DelaySdeNet:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# --- rollout with reverse mode ----------------------------------------------


def _rollout(nets, normalizer, scale, t, windows, dt, n_steps):
    windows = np.asarray(windows, dtype=float)
    n, p, d = windows.shape
    buf = np.empty((n, p + n_steps, d))
    buf[:, :p] = windows
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    caches = []
    for s in range(n_steps):
        z = normalizer.features(t + s * dt, buf[:, s : s + p])
        f = np.empty((n, d))
        step = []
        for j, net in enumerate(nets):
            out, c = net.forward_cached(z)
            f[:, j] = scale[j] * out
            step.append(c)
        buf[:, s + p] = buf[:, s + p - 1] + dt * f
        caches.append(step)
    return buf[:, p:], (buf, caches)


def _rollout_backward(nets, normalizer, scale, dt, n_steps, p, tape, adj_final):
    """Reverse pass of ``_rollout`` given dL/d(final state); returns flat parameter gradient."""
    buf, caches = tape
    n = buf.shape[0]
    dbuf = np.zeros_like(buf)
    dbuf[:, p + n_steps - 1] = adj_final
    grads = [np.zeros(net.n_params) for net in nets]
    for s in reversed(range(n_steps)):
        dx = dbuf[:, s + p]
        dbuf[:, s + p - 1] += dx
        dz = np.zeros((n, nets[0].input_dim))
        for j, net in enumerate(nets):
            g, dzj = net.backward(caches[s][j], scale[j] * dt * dx[:, j])
            grads[j] += g.flat()
            dz += dzj
        dbuf[:, s : s + p] += normalizer.window_adjoint(dz, p)
    return np.concatenate(grads)


def drift_loss_grad(nets, normalizer, scale, ws: SupervisedWindowSet, idx=None, unit: float = 1.0):
    """Mean squared rollout error (divided by ``unit``) and its exact gradient w.r.t. all drift-net parameters."""
    t, win, y = (ws.times, ws.windows, ws.targets) if idx is None else (ws.times[idx], ws.windows[idx], ws.targets[idx])
    pred, tape = _rollout(nets, normalizer, scale, t, win, ws.dt, ws.horizon)
    r = pred[:, -1] - y
    loss = float(np.mean(np.sum(r * r, axis=1))) / unit
    grad = _rollout_backward(nets, normalizer, scale, ws.dt, ws.horizon, ws.p, tape, 2.0 * r / (len(r) * unit))
    return loss, grad


def increment_unit(ws: SupervisedWindowSet) -> float:
    """Mean squared ``N``-step increment; the drift loss is measured in this unit."""
    d = ws.targets - ws.windows[:, -1]
    u = float(np.mean(np.sum(d * d, axis=1)))
    return u if u > 0 else 1.0


def aleatoric_loss_grad(nets, normalizer, scale, t, windows, e2, dt, n_steps, unit=None):
    """Loss ``mean_n sum_j ((V_j dt - e_j**2) / unit_j)**2`` with ``V_j = sum_i (scale_j h_j(t+i dt))**2``.

    ``unit`` (default 1) only rescales each coordinate's term; the nets are
    separate per coordinate so the minimiser is unchanged.
    """
    n = len(t)
    unit = np.ones(len(nets)) if unit is None else np.asarray(unit, dtype=float)
    caches, outs = [], []
    V = np.zeros((n, len(nets)))
    for i in range(n_steps):
        z = normalizer.features(np.asarray(t) + i * dt, windows)
        step_c, step_o = [], []
        for j, net in enumerate(nets):
            o, c = net.forward_cached(z)
            step_c.append(c)
            step_o.append(o)
            V[:, j] += (scale[j] * o) ** 2
        caches.append(step_c)
        outs.append(step_o)
    r = (V * dt - e2) / unit
    loss = float(np.mean(np.sum(r * r, axis=1)))
    dV = 2.0 * r * dt / (n * unit)
    grads = [np.zeros(net.n_params) for net in nets]
    for i in range(n_steps):
        for j, net in enumerate(nets):
            adj = dV[:, j] * 2.0 * scale[j] ** 2 * outs[i][j]
            g, _ = net.backward(caches[i][j], adj)
            grads[j] += g.flat()
    return loss, np.concatenate(grads)


def epistemic_loss_grad(net: TwoLayerNet, z_id, z_ood):
    """``mean(prob(ID)) - mean(prob(OOD))`` with ``prob = sigmoid(net)``."""
    grad = np.zeros(net.n_params)
    loss = 0.0
    for z, sign in ((z_id, 1.0), (z_ood, -1.0)):
        o, c = net.forward_cached(z)
        s = sigmoid(o)
        loss += sign * float(np.mean(s))
        g, _ = net.backward(c, sign * s * (1.0 - s) / len(z))
        grad += g.flat()
    return loss, grad


# --- training ---------------------------------------------------------------


def _batch(seed, stage, it, n, size):
    if size == "full" or int(size) >= n:
        return None
    return np.sort(rng_for(seed, stage, it).choice(n, int(size), replace=False))


def _sgd_loop(loss_grad, theta, cfg: SgdConfig, n, seed, stage, state: StageState | None = None,
              val_loss=None, every: int = 0):
    """Momentum SGD from ``theta`` or a saved state.

    With ``val_loss`` and ``every > 0`` the parameters are scored every
    ``every`` iterations (and at the end) and the best ones are kept.
    """
    if state is None:
        state = StageState(theta.copy(), np.zeros_like(theta), 0, [])
    theta, v = state.theta.copy(), state.velocity.copy()
    losses = list(state.losses)
    best = (state.best_theta, state.best_loss, state.best_iteration)
    track = val_loss is not None and every > 0
    for it in range(state.iterations, cfg.iterations):
        idx = _batch(seed, stage, it, n, cfg.minibatch_size)
        loss, g = loss_grad(theta, idx)
        if not (math.isfinite(loss) and np.all(np.isfinite(g))):
            raise Divergence(f"non-finite loss at iteration {it} of stage {stage}")
        losses.append(loss)
        theta, v = sgd_step(theta, g, cfg, v)
        if track and ((it + 1) % every == 0 or it + 1 == cfg.iterations):
            vl = val_loss(theta)
            if math.isfinite(vl) and vl < best[1]:
                best = (theta.copy(), vl, it + 1)
    if not np.all(np.isfinite(theta)):
        raise Divergence(f"non-finite parameters after stage {stage}")
    return StageState(theta, v, max(cfg.iterations, state.iterations), losses, *best)


def train_drift(model: DelaySdeNet, ws: SupervisedWindowSet, cfg: SgdConfig, seed=0, state=None,
                validation: SupervisedWindowSet | None = None, every: int = 0):
    """Fit the drift nets on the ``N``-step rollout loss; returns (nets, StageState).

    With a validation set and ``every > 0`` the returned nets are the
    checkpoint with the lowest validation rollout loss.
    """
    nets0 = model.drift
    # a constant rescaling keeps step sizes comparable across horizons
    unit = increment_unit(ws)

    def lg(theta, idx):
        return drift_loss_grad(_unflatten(nets0, theta), model.normalizer, model.drift_scale, ws, idx, unit)

    def vl(theta):
        pred = _rollout(_unflatten(nets0, theta), model.normalizer, model.drift_scale,
                        validation.times, validation.windows, validation.dt, validation.horizon)[0]
        r = pred[:, -1] - validation.targets
        return float(np.mean(np.sum(r * r, axis=1)))

    st = _sgd_loop(lg, _flatten(nets0), cfg, len(ws), seed, 11, state,
                   vl if validation is not None else None, every)
    return _unflatten(nets0, st.selected), st


def residuals(model: DelaySdeNet, ws: SupervisedWindowSet) -> np.ndarray:
    """``e = x_hat - x`` at the window's target using the final drift nets."""
    return model.rollout(ws.times, ws.windows, ws.horizon)[:, -1] - ws.targets


def train_aleatoric(model: DelaySdeNet, e: np.ndarray, ws: SupervisedWindowSet, cfg: SgdConfig, seed=0, state=None):
    nets0 = model.aleatoric
    e2 = np.asarray(e) ** 2
    # measure the loss in units of the mean squared residual so step sizes
    # do not depend on the horizon or the data scale
    unit = np.mean(e2, axis=0)
    unit = np.where(unit > 0, unit, 1.0)

    def lg(theta, idx):
        sl = slice(None) if idx is None else idx
        return aleatoric_loss_grad(
            _unflatten(nets0, theta), model.normalizer, model.aleatoric_scale,
            ws.times[sl], ws.windows[sl], e2[sl], ws.dt, ws.horizon, unit,
        )

    st = _sgd_loop(lg, _flatten(nets0), cfg, len(ws), seed, 12, state)
    return _unflatten(nets0, st.theta), st


def train_epistemic(model: DelaySdeNet, id_times, id_windows, ood_times, ood_windows, cfg: SgdConfig, seed=0, state=None):
    """Classifier separating ID windows (pushed to 0) from OOD windows (pushed to 1)."""
    if len(id_times) == 0 or len(ood_times) == 0:
        raise ValueError("need nonempty ID and OOD sets")
    z_id = model.normalizer.features(id_times, id_windows)
    z_ood = model.normalizer.features(ood_times, ood_windows)
    net0 = model.epistemic
    n_id, n_ood = len(z_id), len(z_ood)

    def lg(theta, idx):
        net = net0.with_flat(theta)
        if idx is None:
            return epistemic_loss_grad(net, z_id, z_ood)
        # idx indexes the ID set; draw an equally sized OOD batch from a sibling stream
        j = np.sort(rng_for(seed, 14, int(idx[0]), len(idx)).choice(n_ood, min(len(idx), n_ood), replace=False))
        return epistemic_loss_grad(net, z_id[idx], z_ood[j])

    st = _sgd_loop(lg, net0.flat(), cfg, n_id, seed, 13, state)
    return net0.with_flat(st.theta), st


def _golden(f, lo, hi, rtol=1e-4):
    phi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - phi * (b - a), a + phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > rtol * max(abs(a), abs(b), 1e-12):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = f(d)
    return (a + b) / 2


def sigma_e_objective(prob, aleatoric_std, e2):
    prob = np.asarray(prob, dtype=float).reshape(-1, 1)

    def f(s):
        r = (s * prob + aleatoric_std) ** 2 - e2
        return float(np.mean(np.sum(r * r, axis=1)))

    return f


def tune_sigma_e(prob, aleatoric_std, e, n_grid=301) -> float:
    """Scale of the epistemic std minimising ``mean ||(s*prob + std_a)**2 - e**2||^2``.

    Coarse grid on ``[0, 3 max|e|]`` (smallest argmin wins ties) refined by
    golden-section search.
    """
    e2 = np.asarray(e, dtype=float) ** 2
    aleatoric_std = np.asarray(aleatoric_std, dtype=float)
    f = sigma_e_objective(prob, aleatoric_std, e2)
    hi = 3.0 * float(np.max(np.abs(e))) if np.size(e) else 0.0
    if hi <= 0:
        return 0.0
    grid = np.linspace(0.0, hi, n_grid)
    vals = np.array([f(s) for s in grid])
    i = int(np.argmin(vals))
    if vals.max() - vals.min() <= 1e-14 * max(1.0, abs(vals.min())):
        return 0.0
    lo, up = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
    s = _golden(f, lo, up)
    best = min([(f(x), x) for x in (grid[i], s)], key=lambda z: (z[0], z[1]))
    return float(best[1])


def fit_delay_sde_net(
    train: SupervisedWindowSet,
    cfg: TrainConfig,
    validation: SupervisedWindowSet | None = None,
    ood_windows=None,
    resume: DelaySdeNet | None = None,
) -> DelaySdeNet:
    """Train drift, then aleatoric, then (if OOD data is given) epistemic nets.

    ``ood_windows`` is a pair ``(times, windows)``.  With a validation set and
    a trained classifier, ``sigma_e`` is tuned on validation residuals.  A
    ``resume`` model continues each stage from its saved optimiser state;
    stages downstream of one that changed restart from initialisation.
    """
    norm = Normalizer.fit(train) if resume is None else resume.normalizer
    model = DelaySdeNet.initialize(train.dim, train.p, train.dt, train.horizon, cfg, norm)
    if resume is None:
        inc = (train.targets - train.windows[:, -1]) / (train.horizon * train.dt)
        sd = np.std(inc, axis=0)
        model.drift_scale = np.where(sd > 0, sd, 1.0)
    else:
        model.drift_scale = resume.drift_scale.copy()
        model.aleatoric_scale = resume.aleatoric_scale.copy()
    st_prev = resume.states.get("drift") if resume else None
    model.drift, st = train_drift(model, train, cfg.drift, cfg.seed, st_prev, validation, cfg.validate_every)
    changed = st_prev is None or st.iterations != st_prev.iterations
    model.states["drift"] = st

    e = residuals(model, train)
    if resume is None or changed:
        rms = np.sqrt(np.mean(e * e, axis=0) / (train.horizon * train.dt))
        model.aleatoric_scale = np.where(rms > 0, rms, 1.0)
    st_prev = None if changed else resume.states.get("aleatoric")
    model.aleatoric, st = train_aleatoric(model, e, train, cfg.aleatoric, cfg.seed, st_prev)
    changed = changed or st_prev is None or st.iterations != st_prev.iterations
    model.states["aleatoric"] = st

    if ood_windows is not None:
        st_prev = None if changed else resume.states.get("epistemic")
        if st_prev is not None:
            model.epistemic = model.epistemic.with_flat(st_prev.theta)
        model.epistemic, st = train_epistemic(
            model, train.times, train.windows, ood_windows[0], ood_windows[1], cfg.epistemic, cfg.seed, st_prev
        )
        model.states["epistemic"] = st
        if validation is not None:
            ev = residuals(model, validation)
            std_a = np.sqrt(model.accumulated_variance(validation.times, validation.windows, validation.horizon))
            prob = model.epistemic_prob(validation.times, validation.windows)
            model.sigma_e = tune_sigma_e(prob, std_a, ev)
    return model


# --- prediction -------------------------------------------------------------


@dataclass
class PredictionBundle:
    times: np.ndarray  # (N,) times of the predicted states
    mean: np.ndarray  # (N, d)
    aleatoric_var: np.ndarray  # (N, d): V*dt accumulated up to each step
    epistemic_prob: float
    epistemic_std: float

    @property
    def aleatoric_std(self) -> np.ndarray:
        return np.sqrt(self.aleatoric_var)

    @property
    def total_std(self) -> np.ndarray:
        # standard deviations add because g = g_a + g_e
        return self.aleatoric_std + self.epistemic_std

    def ci(self, level: float = 0.95):
        z = _gauss.ppf(0.5 + level / 2.0)
        return self.mean - z * self.total_std, self.mean + z * self.total_std


def predict(model: DelaySdeNet, history, t_k: float, n_steps: int | None = None) -> PredictionBundle:
    """Forecast ``n_steps`` ahead from the last ``p`` observations ending at time ``t_k``."""
    history = np.asarray(history, dtype=float)
    if history.ndim == 1:
        history = history[:, None]
    if len(history) < model.lags:
        raise InsufficientHistory(f"need {model.lags} points of history, got {len(history)}")
    n_steps = model.horizon if n_steps is None else int(n_steps)
    win = history[-model.lags :][None]
    mean = model.rollout(np.array([t_k]), win, n_steps)[0]
    var = np.empty((n_steps, model.dim))
    acc = np.zeros(model.dim)
    for i in range(n_steps):
        acc = acc + model.aleatoric_raw(np.array([t_k + i * model.dt]), win)[0] ** 2 * model.dt
        var[i] = acc
    prob = float(model.epistemic_prob(np.array([t_k]), win)[0])
    return PredictionBundle(
        t_k + model.dt * np.arange(1, n_steps + 1), mean, var, prob, model.sigma_e * prob
    )


# --- theoretical bound ------------------------------------------------------


@dataclass
class BoundConstants:
    T: float
    p: int
    m: int
    C_L: float
    C_B: float
    eps_F: float
    C_ge: float
    C_f: float
    C_g: float
    C_sigma: float
    gamma: float = 0.5
    C_T: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be nonnegative")
        if self.eps_F > 1:
            raise ValueError("eps_F must lie in [0, 1]")
        if self.m < 1:
            raise ValueError("m must be at least 1")


def theoretical_bound(c: BoundConstants, dt: float) -> tuple[float, float]:
    """``(C_m, sqrt(C_T) dt**gamma + C_m)`` with ``C_m`` evaluated at ``t = T``."""
    inner = c.C_ge + 2.0 * c.C_B * c.eps_F + 3.0 * c.C_sigma / c.m * (2.0 * c.C_g + c.T * c.C_f)
    c_m = math.sqrt(4.0 * c.T * inner * math.exp(2.0 * c.p * c.C_L * (4.0 + 2.0 * c.T) * c.T))
    return c_m, math.sqrt(c.C_T) * dt**c.gamma + c_m


def estimate_bound_constants(spec, model: DelaySdeNet, ws: SupervisedWindowSet, T: float,
                             n_pairs: int = 100_000, seed: int = 0, gamma: float = 0.5,
                             C_T: float = 1.0, eps_F: float = 0.0) -> BoundConstants:
    """Fill the bound's constants from a generating spec and a fitted model.

    ``C_f``/``C_g`` are squared path norms of the generating nets (largest
    coordinate), ``C_ge = sigma_e**2``, and ``C_L``/``C_B`` are sampled over
    the bounding box of the window features.
    """
    from .shallow_net import activation_constant, path_norm

    rng = rng_for(seed, 99)
    n_in = ws.p * ws.dim
    flat = ws.windows.reshape(len(ws), -1)
    lo = np.concatenate([[ws.times.min()], flat.min(axis=0)])
    hi = np.concatenate([[ws.times.max()], flat.max(axis=0)])
    x = rng.uniform(lo, hi, size=(n_pairs, 1 + n_in))
    y = rng.uniform(lo, hi, size=(n_pairs, 1 + n_in))

    def split(u):
        return u[:, 0], u[:, 1:].reshape(len(u), ws.p, ws.dim)

    tx, wx = split(x)
    ty, wy = split(y)
    hx = np.hstack([spec.drift(tx, wx), spec.diffusion(tx, wx)])
    hy = np.hstack([spec.drift(ty, wy), spec.diffusion(ty, wy)])
    dist = np.linalg.norm(x - y, axis=1)
    ok = dist > 0
    c_l = float(np.max(np.linalg.norm(hx - hy, axis=1)[ok] / dist[ok]))
    c_b = float(max(
        np.max((model.drift_value(tx, wx) - spec.drift(tx, wx)) ** 2),
        np.max((model.aleatoric_std(tx, wx) - spec.diffusion(tx, wx)) ** 2),
    ))
    c_f = max(path_norm(n) for n in spec.drift_nets) ** 2
    c_g = max(path_norm(n) for n in spec.diff_nets) ** 2
    c_sigma = max(activation_constant(n.activation)[1] for n in model.drift + model.aleatoric)
    m = min(n.width for n in model.drift + model.aleatoric)
    return BoundConstants(T, ws.p, m, c_l, c_b, eps_F, model.sigma_e**2, c_f, c_g, c_sigma, gamma, C_T)
