"""Comparison models: VAR(p) by least squares and the memoryless SDE-net."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientHistory, NegativeLogArgument, SingularDesign

EPS_LOG = 1e-12


@dataclass
class VarModel:
    """``x_t = c + sum_i phi[i-1] @ x_{t-i} + e_t``; ``variance[j] = (a, b)`` of ``exp(a + b*day)``."""

    phi: np.ndarray  # (p, d, d)
    intercept: np.ndarray  # (d,)
    variance: np.ndarray | None = None  # (d, 2)

    @property
    def order(self) -> int:
        return self.phi.shape[0]

    @property
    def dim(self) -> int:
        return self.phi.shape[1]

    def to_dict(self):
        return {
            "order": self.order,
            "phi": self.phi.tolist(),
            "intercept": self.intercept.tolist(),
            "variance": None if self.variance is None else self.variance.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        var = d.get("variance")
        return cls(np.array(d["phi"], dtype=float), np.array(d["intercept"], dtype=float),
                   None if var is None else np.array(var, dtype=float))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> VarModel:
        return cls.from_dict(json.loads(s))


def _as_series_list(data):
    if isinstance(data, np.ndarray) and data.ndim == 2:
        return [data]
    return [np.asarray(s, dtype=float) for s in data]


def var_design(series: np.ndarray, p: int):
    """Regressor rows ``[1, x_{t-1}, ..., x_{t-p}]`` and targets ``x_t`` for ``t >= p``."""
    n = len(series)
    cols = [np.ones((n - p, 1))] + [series[p - i : n - i] for i in range(1, p + 1)]
    return np.hstack(cols), series[p:]


def fit_var(data, p: int):
    """Per-equation OLS with intercept on one series or a list of independent series.

    Returns ``(VarModel, residuals)`` with residuals ``x - x_hat`` stacked
    over all series.
    """
    series = _as_series_list(data)
    d = series[0].shape[1]
    blocks = [var_design(s, p) for s in series if len(s) > p]
    n_rows = sum(len(b[1]) for b in blocks)
    if n_rows <= d * p + d:
        raise SingularDesign(f"need more than {d * p + d} regression rows, got {n_rows}")
    X = np.vstack([b[0] for b in blocks])
    Y = np.vstack([b[1] for b in blocks])
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise SingularDesign("lagged regressor matrix is rank deficient")
    beta, *_ = np.linalg.lstsq(X, Y, rcond=None)
    resid = Y - X @ beta
    phi = np.stack([beta[1 + d * i : 1 + d * (i + 1)].T for i in range(p)])
    return VarModel(phi, beta[0].copy()), resid


def var_step(model: VarModel, window: np.ndarray) -> np.ndarray:
    """One-step mean from windows (..., p, d) ordered oldest first."""
    p = model.order
    out = np.broadcast_to(model.intercept, window.shape[:-2] + (model.dim,)).copy()
    for i in range(1, p + 1):
        out += window[..., p - i, :] @ model.phi[i - 1].T
    return out


def exp_variance(ab: np.ndarray, day) -> np.ndarray:
    """``exp(a + b*day)`` per coordinate; ``ab`` is (d, 2)."""
    day = np.asarray(day, dtype=float)
    return np.exp(ab[:, 0] + ab[:, 1] * day[..., None])


def var_predict(model: VarModel, history, N: int, day_index=None):
    """Recursive ``N``-step mean and accumulated per-step variance.

    ``day_index`` is the day-of-year of the newest history point; the variance
    of step ``n`` sums ``exp(a + b*day)`` over the ``n`` target days.  Returns
    ``(mean (N, d), variance (N, d) or None)``.
    """
    history = np.asarray(history, dtype=float)
    if history.ndim == 1:
        history = history[:, None]
    if len(history) < model.order:
        raise InsufficientHistory(f"need {model.order} points of history, got {len(history)}")
    win = history[-model.order :].copy()
    mean = np.empty((N, model.dim))
    for n in range(N):
        nxt = var_step(model, win)
        mean[n] = nxt
        win = np.vstack([win[1:], nxt])
    if model.variance is None or day_index is None:
        return mean, None
    days = day_of_year(int(day_index) + np.arange(1, N + 1) - 1)
    return mean, np.cumsum(exp_variance(model.variance, days), axis=0)


def var_predict_windows(model: VarModel, windows: np.ndarray, N: int) -> np.ndarray:
    """Vectorised recursive means for many windows; returns (n, N, d)."""
    win = np.array(windows, dtype=float)
    out = np.empty((len(win), N, model.dim))
    for n in range(N):
        nxt = var_step(model, win)
        out[:, n] = nxt
        win = np.concatenate([win[:, 1:], nxt[:, None]], axis=1)
    return out


def day_of_year(k) -> np.ndarray:
    """Day index ``(k mod 365) + 1`` for a zero-based daily grid index ``k``."""
    return np.mod(np.asarray(k), 365) + 1


def fit_exp_variance(residuals, day_index):
    """Fit ``y = exp(a + b*x)`` to the per-day mean squared residual by log-linear least squares.

    ``residuals`` is (n,) or (n, d); returns ``(a, b)`` arrays of shape (d,)
    (scalars for 1-D input).  Days whose mean is zero are floored at 1e-12
    with a warning.
    """
    r = np.asarray(residuals, dtype=float)
    flat = r.ndim == 1
    if flat:
        r = r[:, None]
    if len(r) == 0:
        raise ValueError("residuals must be nonempty")
    day = np.asarray(day_index)
    days, inv = np.unique(day, return_inverse=True)
    sums = np.zeros((len(days), r.shape[1]))
    np.add.at(sums, inv, r * r)
    y = sums / np.bincount(inv)[:, None]
    if np.any(y <= 0):
        warnings.warn("zero mean squared residual on some days; flooring at 1e-12", stacklevel=2)
        y = np.maximum(y, EPS_LOG)
    if len(days) < 2:
        raise NegativeLogArgument("need at least two distinct days to fit a slope")
    A = np.column_stack([np.ones(len(days)), days.astype(float)])
    coef, *_ = np.linalg.lstsq(A, np.log(y), rcond=None)
    a, b = coef[0], coef[1]
    return (float(a[0]), float(b[0])) if flat else (a, b)


def sde_net_baseline(train_paths, horizon: int, cfg, val_paths=None, ood_fn=None):
    """The memoryless SDE-net: a Delay-SDE-net with a single lag (``p = 1``).

    Uses the same separated training (drift, then aleatoric, then classifier)
    rather than the joint training of the original SDE-net.  ``ood_fn`` maps
    the training windows to ``(times, windows)`` of OOD inputs for the
    classifier; without it no classifier is trained.
    """
    from .model import build_windows, fit_delay_sde_net

    wtr = build_windows(train_paths, 1, horizon)
    wva = None if val_paths is None else build_windows(val_paths, 1, horizon)
    ood = None if ood_fn is None else ood_fn(wtr)
    return fit_delay_sde_net(wtr, cfg, wva, ood)
