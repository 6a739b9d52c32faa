import numpy as np
import pytest

from delay_sde.shallow_net import Activation, init_net


def central_difference(f, theta, h=1e-5):
    """Central finite differences of a scalar function of a flat parameter vector."""
    theta = np.asarray(theta, dtype=float)
    out = np.empty_like(theta)
    for i in range(len(theta)):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        out[i] = (f(tp) - f(tm)) / (2 * h)
    return out


def difference_floor(loss, h=1e-5):
    """Denominator floor for comparing against ``central_difference``.

    Rounding limits the central difference to about ``eps*|loss|/h`` (about
    2e-11 for a unit loss), so entries below ``1e-5*max(1, |loss|)`` are
    compared in absolute terms, roughly five times above that noise.
    """
    return 1e-5 * max(1.0, abs(float(loss))) * (1e-5 / h)


def relative_error(analytic, numeric, floor=1e-6):
    """Per-coordinate relative error with an absolute floor for near-zero entries."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


@pytest.fixture
def small_net():
    def make(n_in=3, width=4, kind="tanh", seed=0, output_bias=False):
        return init_net(n_in, width, Activation(kind), np.random.default_rng(seed), output_bias)

    return make


# one line per acceptance criterion, printed after the run whatever the outcome
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
