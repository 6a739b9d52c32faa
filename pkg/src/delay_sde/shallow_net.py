"""Two-layer neural networks written directly in numpy.

A network computes ``sum_i a_i * act(w_i . x + b_i)`` (plus an optional
scalar output bias).  Gradients are obtained by hand-written reverse mode;
callers with composite objectives pass the derivative of their loss with
respect to the network output (the "output adjoint") and receive parameter
and input gradients back.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, QuadratureFailure

ACTIVATIONS = ("tanh", "sigmoid", "relu")


@dataclass(frozen=True)
class Activation:
    """Activation function with its scale parameter.

    ``tanh`` is ``tanh(param * z)``, ``sigmoid`` is ``1 / (1 + exp(-param * z))``;
    ``relu`` ignores ``param``.
    """

    kind: str = "tanh"
    param: float = 1.0

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r}")
        if not self.param > 0:
            raise ValueError("activation parameter must be positive")

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "tanh":
            return np.tanh(self.param * z)
        if self.kind == "sigmoid":
            return _sigmoid(self.param * z)
        return np.maximum(z, 0.0)

    def deriv(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "tanh":
            t = np.tanh(self.param * z)
            return self.param * (1.0 - t * t)
        if self.kind == "sigmoid":
            s = _sigmoid(self.param * z)
            return self.param * s * (1.0 - s)
        return (z > 0).astype(float)

    def deriv_from_output(self, h, z):
        """Derivative given both the pre-activation ``z`` and the output ``h = self(z)``."""
        if self.kind == "tanh":
            return self.param * (1.0 - h * h)
        if self.kind == "sigmoid":
            return self.param * h * (1.0 - h)
        return (z > 0).astype(float)

    def second_deriv(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "tanh":
            t = np.tanh(self.param * z)
            return -2.0 * self.param**2 * t * (1.0 - t * t)
        if self.kind == "sigmoid":
            s = _sigmoid(self.param * z)
            return self.param**2 * s * (1.0 - s) * (1.0 - 2.0 * s)
        return np.zeros_like(z)

    def to_dict(self):
        return {"kind": self.kind, "param": self.param}


def _sigmoid(z):
    # split by sign so exp never overflows
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


sigmoid = _sigmoid


@dataclass
class TwoLayerNet:
    a: np.ndarray
    w: np.ndarray
    b: np.ndarray
    activation: Activation = field(default_factory=Activation)
    output_bias: float | None = None

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float).reshape(-1)
        self.w = np.asarray(self.w, dtype=float)
        if self.w.ndim == 1:
            self.w = self.w.reshape(len(self.a), -1)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        m = len(self.a)
        if self.w.shape[0] != m or len(self.b) != m:
            raise DimensionMismatch("a, w and b must agree on the width")
        if self.output_bias is not None:
            self.output_bias = float(self.output_bias)

    @property
    def width(self) -> int:
        return len(self.a)

    @property
    def input_dim(self) -> int:
        return self.w.shape[1]

    @property
    def n_params(self) -> int:
        return self.width * (self.input_dim + 2) + (self.output_bias is not None)

    def __call__(self, x):
        return forward(self, x)

    def forward_cached(self, x):
        """Forward pass on a batch, returning (output, cache for ``backward``)."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionMismatch(f"expected (n, {self.input_dim}) input, got {x.shape}")
        pre = x @ self.w.T + self.b
        hidden = self.activation(pre)
        out = hidden @ self.a
        if self.output_bias is not None:
            out = out + self.output_bias
        return out, (x, pre, hidden)

    def backward(self, cache, adjoint):
        """Reverse pass: ``adjoint[n]`` is dL/d(output[n]).

        Returns the parameter gradient (as a net of the same shape) and dL/dx.
        """
        x, pre, hidden = cache
        adjoint = np.asarray(adjoint, dtype=float)
        da = hidden.T @ adjoint
        dpre = np.outer(adjoint, self.a) * self.activation.deriv_from_output(hidden, pre)
        dw = dpre.T @ x
        db = dpre.sum(axis=0)
        dx = dpre @ self.w
        dbias = float(adjoint.sum()) if self.output_bias is not None else None
        grad = TwoLayerNet(da, dw, db, self.activation, dbias)
        return grad, dx

    def flat(self) -> np.ndarray:
        parts = [self.a, self.w.ravel(), self.b]
        if self.output_bias is not None:
            parts.append([self.output_bias])
        return np.concatenate(parts)

    def with_flat(self, theta) -> TwoLayerNet:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise DimensionMismatch(f"expected {self.n_params} parameters, got {theta.shape}")
        m, n = self.width, self.input_dim
        a = theta[:m]
        w = theta[m : m + m * n].reshape(m, n)
        b = theta[m + m * n : m + m * n + m]
        ob = float(theta[-1]) if self.output_bias is not None else None
        return TwoLayerNet(a.copy(), w.copy(), b.copy(), self.activation, ob)

    def copy(self) -> TwoLayerNet:
        return self.with_flat(self.flat())

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "input_dim": self.input_dim,
            "activation": self.activation.to_dict(),
            "a": self.a.tolist(),
            "w": self.w.tolist(),
            "b": self.b.tolist(),
            "output_bias": self.output_bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> TwoLayerNet:
        net = cls(
            np.array(d["a"], dtype=float),
            np.array(d["w"], dtype=float).reshape(d["width"], d["input_dim"]),
            np.array(d["b"], dtype=float),
            Activation(**d["activation"]),
            d.get("output_bias"),
        )
        return net

    def to_json(self) -> str:
        # json writes floats via repr, which round-trips float64 exactly
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> TwoLayerNet:
        return cls.from_dict(json.loads(s))


def init_net(input_dim, width, activation=None, rng=None, output_bias=False) -> TwoLayerNet:
    """Fan-in uniform initialisation: every parameter ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    activation = activation or Activation()
    rng = np.random.default_rng(rng)
    lim_in = 1.0 / math.sqrt(input_dim)
    lim_out = 1.0 / math.sqrt(width)
    w = rng.uniform(-lim_in, lim_in, size=(width, input_dim))
    b = rng.uniform(-lim_in, lim_in, size=width)
    a = rng.uniform(-lim_out, lim_out, size=width)
    ob = 0.0 if output_bias else None
    return TwoLayerNet(a, w, b, activation, ob)


def forward(net: TwoLayerNet, x):
    """Evaluate the network on one input vector (returns float) or a batch (returns array)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != net.input_dim:
            raise DimensionMismatch(f"expected input of length {net.input_dim}, got {x.shape[0]}")
        return float(net.forward_cached(x[None, :])[0][0])
    return net.forward_cached(x)[0]


def gradient(net: TwoLayerNet, x, target=None, *, adjoint=None, return_input_grad=False):
    """Exact gradient of a batch loss with respect to the network parameters.

    With ``target`` the loss is the mean squared error ``mean((net(x) - target)**2)``.
    Otherwise ``adjoint`` must be either an array of dL/d(output) per row or a
    callable mapping the outputs to that array, which is how chained objectives
    (squared outputs, rollouts, classifiers) are expressed.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if len(x) == 0:
        raise ValueError("empty batch")
    out, cache = net.forward_cached(x)
    if adjoint is None:
        if target is None:
            raise ValueError("need either target or adjoint")
        target = np.asarray(target, dtype=float).reshape(-1)
        if target.shape != out.shape:
            raise DimensionMismatch("target length does not match batch")
        adj = 2.0 * (out - target) / len(out)
    elif callable(adjoint):
        adj = np.asarray(adjoint(out), dtype=float)
    else:
        adj = np.asarray(adjoint, dtype=float).reshape(-1)
    grad, dx = net.backward(cache, adj)
    if return_input_grad:
        return grad, dx
    return grad


@dataclass(frozen=True)
class SgdConfig:
    """Stochastic gradient descent with classical (coupled) weight decay."""

    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-5
    iterations: int = 500
    minibatch_size: int | str = "full"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.minibatch_size != "full" and int(self.minibatch_size) < 1:
            raise ValueError("minibatch_size must be positive or 'full'")


def sgd_step(params, grad, cfg: SgdConfig, velocity=None):
    """One momentum step.

    ``velocity <- momentum * velocity + grad + weight_decay * params`` and
    ``params <- params - lr * velocity``.  Accepts flat arrays or
    :class:`TwoLayerNet` values (returned in the same form).
    """
    as_net = isinstance(params, TwoLayerNet)
    theta = params.flat() if as_net else np.asarray(params, dtype=float)
    g = grad.flat() if isinstance(grad, TwoLayerNet) else np.asarray(grad, dtype=float)
    if g.shape != theta.shape:
        raise DimensionMismatch("gradient shape does not match parameters")
    v = np.zeros_like(theta) if velocity is None else np.asarray(velocity, dtype=float)
    v = cfg.momentum * v + g + cfg.weight_decay * theta
    theta = theta - cfg.learning_rate * v
    if as_net:
        return params.with_flat(theta), v
    return theta, v


def path_norm(net: TwoLayerNet) -> float:
    """``sum_i |a_i| (||w_i||_1 + |b_i| + 1)``, an upper bound on the Barron norm."""
    return float(np.sum(np.abs(net.a) * (np.abs(net.w).sum(axis=1) + np.abs(net.b) + 1.0)))


# --- activation constants -------------------------------------------------


def adaptive_simpson(f, lo, hi, tol=1e-12, max_intervals=200_000):
    """Adaptive Simpson quadrature with Richardson correction (explicit stack)."""

    def simpson(fa, fm, fb, h):
        return h / 6.0 * (fa + 4.0 * fm + fb)

    fa, fb, fm = f(lo), f(hi), f(0.5 * (lo + hi))
    stack = [(lo, hi, fa, fm, fb, simpson(fa, fm, fb, hi - lo), tol)]
    total = 0.0
    n = 0
    while stack:
        a, b, fa, fm, fb, whole, eps = stack.pop()
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, m - a)
        right = simpson(fm, frm, fb, b - m)
        delta = left + right - whole
        n += 1
        if n > max_intervals:
            raise QuadratureFailure("adaptive Simpson did not reach tolerance")
        if abs(delta) <= 15.0 * eps or b - a < 1e-12:
            total += left + right + delta / 15.0
        else:
            stack.append((a, m, fa, flm, fm, left, eps / 2.0))
            stack.append((m, b, fm, frm, fb, right, eps / 2.0))
    return total


def _tail_bound(act: Activation, B: float) -> float:
    """Upper bound on the integral of |act''|(|x|+1) over |x| > B."""
    c = act.param
    if act.kind == "tanh":
        # |tanh''(cx)| c^2 <= 8 c^2 exp(-2c|x|)
        one = 8 * c**2 * math.exp(-2 * c * B) * ((B + 1) / (2 * c) + 1 / (4 * c**2))
    else:
        # |sigmoid''| <= c^2 exp(-c|x|)
        one = c**2 * math.exp(-c * B) * ((B + 1) / c + 1 / c**2)
    return 2.0 * one


def _gamma0(act: Activation, tail_tol=1e-10, tol=1e-12) -> tuple[float, float]:
    B = 1.0
    while _tail_bound(act, B) >= tail_tol:
        B *= 1.5
    integrand = lambda x: abs(float(act.second_deriv(x))) * (abs(x) + 1.0)
    # the integrand has a kink at 0; integrate both halves separately
    val = adaptive_simpson(integrand, -B, 0.0, tol) + adaptive_simpson(integrand, 0.0, B, tol)
    return val, B


def _inf_u(act: Activation, B: float) -> float:
    from scipy.optimize import minimize_scalar

    u = lambda x: abs(float(act(x))) + (abs(x) + 2.0) * abs(float(act.deriv(x)))
    # limits at +-inf: |act(+-inf)| (derivative decays exponentially)
    limits = [abs(float(act(1e6))), abs(float(act(-1e6)))]
    grid = np.linspace(-B, B, 4001)
    vals = np.array([u(x) for x in grid])
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    best = vals[i]
    if hi > lo:
        res = minimize_scalar(u, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
        best = min(best, float(res.fun))
    return min([best] + limits)


def activation_constant(act: Activation) -> tuple[float, float]:
    """Return ``(gamma, C_sigma)`` for the Barron approximation bound.

    ``gamma = int |act''|(|x|+1) dx + inf_x [|act(x)| + (|x|+2)|act'(x)|]`` and
    ``C_sigma = (gamma + min(|act'(+inf)|, |act'(-inf)|) + |act(0)|)**2``.
    ReLU is evaluated analytically (act'' is a unit point mass at 0).
    """
    if act.kind == "relu":
        gamma0, inf_u = 1.0, 0.0
        slope_min = 0.0
    else:
        gamma0, B = _gamma0(act)
        inf_u = _inf_u(act, B)
        slope_min = 0.0  # tanh and sigmoid both flatten out at +-inf
    gamma = gamma0 + inf_u
    c_sigma = (gamma + slope_min + abs(float(act(0.0)))) ** 2
    return gamma, c_sigma
