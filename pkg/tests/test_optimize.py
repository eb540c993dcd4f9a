import io
import json

import numpy as np
import pytest

from conftest import random_spd
from vbsens.difflinalg import Derivatives
from vbsens.objectives import MvnClosedKL
from vbsens.optimize import OptimizerConfig, is_strict_minimum, map_estimate, minimize, steihaug_cg
from vbsens.targets import MixtureTarget, MvnTarget


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(gtol=0.0)
    with pytest.raises(ValueError):
        OptimizerConfig(initial_radius=5.0, max_radius=1.0)


def test_quadratic_converges_quickly():
    rng = np.random.default_rng(0)
    a_mat = random_spd(rng, 6)
    a = rng.standard_normal(6)
    field = Derivatives(lambda x: 0.5 * (x - a) @ a_mat @ (x - a)).bind()
    res = minimize(field, np.zeros(6), OptimizerConfig(initial_radius=10.0))
    assert res.converged
    np.testing.assert_allclose(res.x, a, atol=1e-10)
    assert res.n_iter <= 6


def test_rosenbrock():
    field = Derivatives(lambda x: (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2).bind()
    res = minimize(field, np.array([-1.2, 1.0]), OptimizerConfig(gtol=1e-12))
    assert res.converged and not res.degenerate
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-8)


def test_objective_non_increasing_and_trace_streamed():
    field = Derivatives(lambda x: (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2).bind()
    buf = io.StringIO()
    res = minimize(field, np.array([-1.2, 1.0]), trace_stream=buf)
    fs = [r["f"] for r in res.trace]
    assert all(b <= a + 1e-15 * (1 + abs(a)) for a, b in zip(fs, fs[1:]))
    lines = [json.loads(s) for s in buf.getvalue().splitlines()]
    assert lines == res.trace
    assert set(lines[0]) == {"iter", "f", "gnorm", "radius"}


def test_deterministic_traces():
    field = Derivatives(lambda x: (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2).bind()
    a = minimize(field, np.array([-1.2, 1.0]))
    b = minimize(field, np.array([-1.2, 1.0]))
    assert a.trace == b.trace and np.array_equal(a.x, b.x)


def test_converged_implies_gradient_tolerance():
    rng = np.random.default_rng(1)
    target = MvnTarget(rng.standard_normal(4), random_spd(rng, 4))
    res = minimize(MvnClosedKL(target).at(), np.zeros(8))
    assert res.converged and res.grad_norm <= res.grad_tolerance(1e-8)


def test_mvn_closed_kl_fit():
    rng = np.random.default_rng(2)
    target = MvnTarget(rng.standard_normal(4), random_spd(rng, 4))
    res = minimize(MvnClosedKL(target).at(), np.zeros(8))
    np.testing.assert_allclose(res.x[:4], target.mean, atol=1e-8)
    np.testing.assert_allclose(np.exp(2 * res.x[4:]), 1 / np.diag(target.precision), atol=1e-8)


def test_non_convergence_is_reported():
    field = Derivatives(lambda x: (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2).bind()
    res = minimize(field, np.array([-1.2, 1.0]), OptimizerConfig(max_iter=2))
    assert not res.converged and "maximum" in res.message


def test_saddle_flagged_degenerate():
    # gradient exactly zero at a saddle: the loop stops but the Hessian check fails
    field = Derivatives(lambda x: x[0] ** 2 - x[1] ** 2).bind()
    res = minimize(field, np.zeros(2))
    assert res.converged and res.degenerate
    assert not is_strict_minimum(np.diag([1.0, -1.0]))


def test_steihaug_negative_curvature_hits_boundary():
    h = np.diag([1.0, -1.0])
    p, hit = steihaug_cg(lambda v: h @ v, np.array([0.0, 1.0]), 2.0, 1e-10, 10)
    assert hit and np.linalg.norm(p) == pytest.approx(2.0)


def test_map_of_mvn_is_mean():
    rng = np.random.default_rng(3)
    t = MvnTarget(rng.standard_normal(3), random_spd(rng, 3))
    res = map_estimate(t.log_density, np.zeros(3))
    np.testing.assert_allclose(res.x, t.mean, atol=1e-8)


def test_map_symmetric_mixture_at_center():
    t = MixtureTarget([0.5, 0.5], [[-0.5], [0.5]], [[[1.0]], [[1.0]]])
    res = map_estimate(t.log_density, np.array([0.3]))
    assert res.converged
    assert res.x[0] == pytest.approx(0.0, abs=1e-8)


def test_map_skewed_mixture_left_of_mean():
    t = MixtureTarget([0.8, 0.2], [[0.0], [3.0]], [[[1.0]], [[2.0]]])
    draws = t.sample(np.random.default_rng(4), 1_000_000)[:, 0]
    mean, se = draws.mean(), draws.std() / 1e3
    res = map_estimate(t.log_density, np.zeros(1))
    assert res.converged
    assert res.x[0] < mean - 4 * se
    assert abs(res.x[0]) < 0.5  # the dominant component's mode
