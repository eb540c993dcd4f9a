import sys

import numpy as np
import pytest

import vbsens  # noqa: F401  (enables float64 in jax)
from vbsens.harness.data import gen_glmm_data


def central_diff_grad(f, x, h=1e-5):
    """Central-difference gradient with step h * (1 + |x_i|)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        step = h * (1.0 + abs(x[i]))
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (float(f(x + e)) - float(f(x - e))) / (2.0 * step)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def random_spd(rng, k, lo=0.5, hi=2.0):
    q, _ = np.linalg.qr(rng.standard_normal((k, k)))
    return (q * rng.uniform(lo, hi, k)) @ q.T


@pytest.fixture(scope="session")
def small_glmm():
    return gen_glmm_data(10, 8, [0.8, -0.4], -0.5, 1.0, seed=3, group_level_covariates=1)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
