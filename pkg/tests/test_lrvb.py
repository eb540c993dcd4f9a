import numpy as np
import pytest

from conftest import random_spd, rel_err
from vbsens.baselines import laplace_fit
from vbsens.errors import ConsistencyError, DegenerateError, NonConvergenceError
from vbsens.family import Query
from vbsens.lrvb import (
    BlockLayout,
    LrvbSystem,
    adequacy_check,
    block_solve,
    build_system,
    check_arrow_structure,
    frequentist_cov,
    lrvb_covariance,
    normalized_sensitivity,
    probe_arrow_structure,
    pushforward_cov,
    sensitivity,
    sensitivity_report,
)
from vbsens.difflinalg import cholesky_solve
from vbsens.objectives import FixedDrawKL, GlmmKL, MvnClosedKL
from vbsens.optimize import FitResult, OptimizerConfig, minimize
from vbsens.targets import MvnTarget, TiltingPerturbation


def fit_mvn(cov, mean=None, pert=None):
    k = cov.shape[0]
    target = MvnTarget(np.zeros(k) if mean is None else mean, cov)
    obj = MvnClosedKL(target, pert)
    fit = minimize(obj.at(), np.zeros(2 * k))
    return obj, fit


def test_bivariate_worked_example():
    cov = np.array([[2.0, 1.0], [1.0, 2.0]])
    obj, fit = fit_mvn(cov)
    assert np.exp(2 * fit.x[2]) == pytest.approx(1.5, abs=1e-9)
    sys = build_system(obj, fit, Query.identity([0, 1]))
    np.testing.assert_allclose(lrvb_covariance(sys), cov, atol=1e-9)


def test_mvn_lrvb_is_exact_and_dominates_mean_field():
    rng = np.random.default_rng(0)
    for k in range(2, 7):
        cov = random_spd(rng, k)
        obj, fit = fit_mvn(cov, rng.standard_normal(k))
        c = lrvb_covariance(build_system(obj, fit, Query.identity(range(k))))
        np.testing.assert_allclose(c, cov, atol=1e-6)
        assert np.all(np.exp(2 * fit.x[k:]) <= np.diag(c) + 1e-12)
        np.testing.assert_array_equal(c, c.T)


def test_identity_query_is_upper_left_block_of_inverse_hessian():
    rng = np.random.default_rng(1)
    obj, fit = fit_mvn(random_spd(rng, 3))
    sys = build_system(obj, fit, Query.identity(range(3)))
    hinv = np.linalg.inv(obj.at().hessian(fit.x))
    np.testing.assert_allclose(lrvb_covariance(sys), hinv[:3, :3], atol=1e-12)


def test_tilting_gives_f_equal_g_and_bitwise_sensitivity():
    rng = np.random.default_rng(2)
    obj, fit = fit_mvn(random_spd(rng, 3), pert=TiltingPerturbation((0, 1, 2)))
    sys = build_system(obj, fit, Query.identity(range(3)))
    np.testing.assert_array_equal(sys.f_alpha_eta, sys.g_eta)
    assert np.array_equal(sensitivity(sys), lrvb_covariance(sys))


def test_frozen_draw_f_alpha_eta_carries_draw_mean():
    # differentiating the frozen-draw estimate of E_q[theta] gives [I | diag(sd * zbar)]
    target = MvnTarget(np.zeros(2), np.eye(2))
    obj = FixedDrawKL(target, n_draws=10, seed=0, pert=TiltingPerturbation((0, 1)))
    eta = np.array([0.2, -0.1, 0.3, -0.4])
    f = obj.f_alpha_eta(eta)
    zbar = obj.draws.mean(0)
    want = np.hstack([np.eye(2), np.diag(np.exp(eta[2:]) * zbar)])
    np.testing.assert_allclose(f, want, atol=1e-14)


def test_zero_f_alpha_eta_gives_zero_sensitivity():
    obj, fit = fit_mvn(np.eye(2))
    sys = build_system(obj, fit, Query.identity([0, 1]))
    assert sys.f_alpha_eta.shape == (0, 4)
    sys.f_alpha_eta = np.zeros((1, 4))
    np.testing.assert_array_equal(sensitivity(sys), np.zeros((2, 1)))


def test_gradient_gate_is_a_hard_refusal():
    obj, fit = fit_mvn(np.eye(2), mean=np.array([1.0, 1.0]))
    moved = FitResult(fit.x + 0.1, fit.fun, fit.grad_norm, fit.n_iter, True)
    with pytest.raises(NonConvergenceError):
        build_system(obj, moved, Query.identity([0]))
    unconverged = FitResult(fit.x, fit.fun, fit.grad_norm, fit.n_iter, False)
    with pytest.raises(NonConvergenceError):
        build_system(obj, unconverged, Query.identity([0]))


def test_non_pd_hessian_is_degenerate():
    class Saddle:
        from vbsens.family import Layout

        layout = Layout.normal(1)
        alpha0 = np.zeros(0)
        block_structure = None

        def at(self, alpha=None):
            from vbsens.difflinalg import Derivatives

            return Derivatives(lambda x: x[0] ** 2 - x[1] ** 2).bind()

        def f_alpha_eta(self, eta, alpha=None):
            return np.zeros((0, 2))

    fit = FitResult(np.zeros(2), 0.0, 0.0, 0, True)
    with pytest.raises(DegenerateError):
        build_system(Saddle(), fit, Query.identity([0]))


def test_normalized_sensitivity_properties():
    cov = np.diag([4.0, 9.0])
    np.testing.assert_allclose(np.diag(normalized_sensitivity(cov, cov)), [2.0, 3.0])
    rng = np.random.default_rng(3)
    s = rng.standard_normal((2, 3))
    c = random_spd(rng, 2)
    d = np.diag([5.0, 0.2])
    np.testing.assert_allclose(normalized_sensitivity(d @ s, d @ c @ d), normalized_sensitivity(s, c), rtol=1e-14)
    with pytest.raises(DegenerateError):
        normalized_sensitivity(s, np.zeros((2, 2)))


def test_sensitivity_report_labels():
    obj, fit = fit_mvn(np.eye(2), pert=TiltingPerturbation((0, 1)))
    rep = sensitivity_report(build_system(obj, fit, Query.identity([0, 1], labels=["a", "b"])))
    d = rep.to_dict()
    assert d["g_labels"] == ["a", "b"] and d["alpha_labels"] == ["alpha_0", "alpha_1"]


def test_psd_check_rejects_indefinite_result():
    sys = LrvbSystem(eta=np.zeros(2), g_eta=np.eye(2), f_alpha_eta=np.zeros((0, 2)), grad_norm=0.0,
                     hessian=np.diag([1.0, 1.0]))
    sys._solves["g_eta"] = np.diag([1.0, -1.0])
    with pytest.raises(ConsistencyError):
        lrvb_covariance(sys)


# ---------------------------------------------------------------------------
# block solves


def random_arrow(rng, n_global, n_local, width):
    """SPD matrix whose local-local cross blocks are exactly zero."""
    n = n_global + n_local * width
    blocks = BlockLayout(range(n_global), tuple(range(n_global + t * width, n_global + (t + 1) * width)
                                                  for t in range(n_local)))
    h = random_spd(rng, n)
    g = np.arange(n_global)
    mask = np.ones((n, n), dtype=bool)
    mask[g, :] = mask[:, g] = False
    for r in blocks.local_ranges:
        mask[np.ix_(r, r)] = False
    h[mask] = 0.0
    h += np.eye(n) * (1.0 + abs(np.linalg.eigvalsh(h)[0]))
    return h, blocks


def test_block_solve_matches_dense_on_random_arrows():
    rng = np.random.default_rng(4)
    for _ in range(5):
        h, blocks = random_arrow(rng, 3, 6, 2)
        assert check_arrow_structure(h, blocks)
        b = rng.standard_normal((h.shape[0], 3))
        np.testing.assert_allclose(block_solve(h, b, blocks), np.linalg.solve(h, b), atol=1e-10)


def test_block_solve_without_global_coupling():
    rng = np.random.default_rng(5)
    blocks = BlockLayout(range(0), (range(0, 2), range(2, 4)))
    h = np.zeros((4, 4))
    h[:2, :2] = random_spd(rng, 2)
    h[2:, 2:] = random_spd(rng, 2)
    b = rng.standard_normal(4)
    x = block_solve(h, b, blocks)
    np.testing.assert_allclose(x[:2], np.linalg.solve(h[:2, :2], b[:2]), atol=1e-12)
    np.testing.assert_allclose(x[2:], np.linalg.solve(h[2:, 2:], b[2:]), atol=1e-12)


def test_block_layout_must_partition():
    with pytest.raises(ConsistencyError):
        BlockLayout(range(2), (range(1, 3),))


def test_glmm_block_solve_vs_dense(small_glmm):
    obj = GlmmKL(small_glmm)
    fit = minimize(obj.at(), np.zeros(obj.layout.size))
    h = obj.at().hessian(fit.x)
    blocks = BlockLayout.from_objective(obj)
    assert check_arrow_structure(h, blocks)
    assert probe_arrow_structure(obj.at().oracle(fit.x), blocks, n_probes=5)
    b = np.random.default_rng(6).standard_normal((h.shape[0], 4))
    assert rel_err(block_solve(h, b, blocks), cholesky_solve(h, b)) < 1e-8
    q = Query.identity(range(small_glmm.theta_dim))
    dense = lrvb_covariance(build_system(obj, fit, q, mode="dense"))
    block = lrvb_covariance(build_system(obj, fit, q, mode="block"))
    free = lrvb_covariance(build_system(obj, fit, q, mode="matrix_free"))
    np.testing.assert_allclose(block, dense, atol=1e-8)
    np.testing.assert_allclose(free, dense, atol=1e-6)


def test_glmm_mu0_sensitivity_vs_refits(small_glmm):
    obj = GlmmKL(small_glmm)
    cfg = OptimizerConfig(gtol=1e-10)
    fit = minimize(obj.at(), np.zeros(obj.layout.size), cfg)
    k = small_glmm.k_x
    q = Query.identity(list(range(k + 1)) + list(range(k + 2, small_glmm.theta_dim)))
    s = sensitivity(build_system(obj, fit, q, cfg=cfg))[:, 3]
    from vbsens.family import expect_g

    def means(delta):
        a = obj.alpha0.copy()
        a[3] += delta
        r = minimize(obj.at(a), fit.x, cfg)
        assert r.converged
        return np.asarray(expect_g(obj.layout, r.x, q))

    fd = (means(0.1) - means(-0.1)) / 0.2
    assert rel_err(s, fd) < 0.05


# ---------------------------------------------------------------------------
# Monte-Carlo adequacy and pushforward


def test_closed_form_objective_is_always_adequate():
    obj, fit = fit_mvn(np.eye(2))
    sys = build_system(obj, fit, Query.identity([0, 1]))
    np.testing.assert_array_equal(frequentist_cov(obj, sys), 0.0)
    rep = adequacy_check(obj, sys, lrvb_covariance(sys))
    assert rep.adequate and rep.recommendation == "keep"


def _mc_fit(target, m, seed):
    obj = FixedDrawKL(target, n_draws=m, seed=seed)
    fit = minimize(obj.at(), np.zeros(2 * target.dim))
    sys = build_system(obj, fit, Query.identity(range(target.dim)))
    return obj, fit, sys


def test_adequacy_standard_normal_ten_draws():
    target = MvnTarget(np.zeros(1), np.eye(1))
    sds = []
    for seed in range(10):
        obj, fit, sys = _mc_fit(target, 10, seed)
        rep = adequacy_check(obj, sys, np.eye(1))
        assert rep.adequate
        sds.append(rep.sampling_sd[0])
    # the sampling sd of the fitted mean is about 1 / sqrt(M)
    assert np.median(sds) == pytest.approx(1 / np.sqrt(10), rel=0.3)
    # the fitted mean has the analytic form -zbar / s (s the draws' 1/M sd)
    z = obj.draws[:, 0]
    assert fit.x[0] == pytest.approx(-z.mean() / z.std(), abs=1e-8)


def test_adequacy_flags_and_doubling_halves_variance():
    rng = np.random.default_rng(7)
    target = MvnTarget(np.zeros(2), random_spd(rng, 2))
    ratios = []
    for seed in range(8):
        obj, fit, sys = _mc_fit(target, 4, seed)
        v4 = frequentist_cov(obj, sys)[0, 0]
        obj, fit, sys = _mc_fit(target, 8, seed + 50)
        v8 = frequentist_cov(obj, sys)[0, 0]
        ratios.append(v8 / v4)
    assert np.mean(ratios) == pytest.approx(0.5, rel=0.3)
    obj, fit, sys = _mc_fit(target, 2, 0)
    rep = adequacy_check(obj, sys, np.eye(2) * 1e-4)
    assert not rep.adequate and rep.recommendation == "increase the number of draws"


def test_pushforward_identity_and_linear():
    rng = np.random.default_rng(8)
    cov = random_spd(rng, 2)
    mean = rng.standard_normal(2)
    n = 1_000_000
    c = pushforward_cov(mean, cov, lambda t: t, n_draws=n, seed=1)
    se = np.sqrt((cov**2 + np.outer(np.diag(cov), np.diag(cov))) / n)
    assert np.all(np.abs(c - cov) < 4 * se)
    a = np.array([[1.0, 2.0], [0.0, -1.0], [3.0, 1.0]])
    c = pushforward_cov(mean, cov, lambda t: t @ a.T, n_draws=n, seed=2)
    want = a @ cov @ a.T
    se = np.sqrt((want**2 + np.outer(np.diag(want), np.diag(want))) / n)
    assert np.all(np.abs(c - want) < 4 * se)


def test_pushforward_lognormal():
    mu, s2 = 0.3, 0.25
    n = 1_000_000
    c = pushforward_cov(np.array([mu]), np.array([[s2]]), np.exp, n_draws=n, seed=3)[0, 0]
    want = (np.exp(s2) - 1) * np.exp(2 * mu + s2)
    # se of a sample variance: sqrt((m4 - var^2) / n) with lognormal central moments
    draws = np.exp(mu + np.sqrt(s2) * np.random.default_rng(99).standard_normal(n))
    se = np.sqrt((np.mean((draws - draws.mean()) ** 4) - draws.var() ** 2) / n)
    assert abs(c - want) < 4 * se


def test_point_mass_equivalence_with_laplace():
    from vbsens.targets import MixtureTarget

    t = MixtureTarget([0.7, 0.3], [[0.0, 0.0], [1.5, -0.5]], [np.eye(2), [[2.0, 0.3], [0.3, 1.0]]])
    lap = laplace_fit(t.log_density, np.zeros(2))
    sys = LrvbSystem(eta=lap.theta_hat, g_eta=np.eye(2), f_alpha_eta=np.zeros((0, 2)), grad_norm=0.0,
                     hessian=lap.hessian)
    np.testing.assert_allclose(lrvb_covariance(sys), lap.cov, atol=1e-14)
