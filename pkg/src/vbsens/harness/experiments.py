"""End-to-end experiment runs: MFVB, LRVB, Laplace and an exact or MCMC reference."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from importlib import metadata as importlib_metadata
from typing import Callable

import jax
import numpy as np
import scipy

from vbsens.baselines import ChainOutput, laplace_fit, mcmc_sensitivity, rwm_sample
from vbsens.baselines import ess as chain_ess
from vbsens.errors import ConfigError, VbsensError
from vbsens.family import Query, expect_g, q_covariance
from vbsens.harness.config import ExperimentConfig
from vbsens.harness.data import gen_glmm_data
from vbsens.harness.report import ComparisonReport
from vbsens.lrvb import adequacy_check, build_system, lrvb_covariance, normalized_sensitivity, sensitivity
from vbsens.objectives import FixedDrawKL, GlmmKL, MvnClosedKL
from vbsens.optimize import minimize
from vbsens.targets.glmm import (
    ALPHA_NAMES,
    GlmmModel,
    glmm_log_joint_unconstrained,
    glmm_prior_dalpha,
    read_glmm_data,
)
from vbsens.targets.mixture import MixtureTarget, MvnTarget
from vbsens.targets.quadrature import GaussHermiteRule

log = logging.getLogger(__name__)

# Failures that are recorded in the report instead of aborting the run.
STAGE_ERRORS = (VbsensError, ValueError, ArithmeticError, np.linalg.LinAlgError)


def _version(pkg: str) -> str | None:
    try:
        return importlib_metadata.version(pkg)
    except importlib_metadata.PackageNotFoundError:
        return None


def provenance(cfg: ExperimentConfig, **extra) -> dict:
    """Config hash, seeds and library versions; no wall-clock data."""
    from vbsens import __version__

    out = {
        "experiment": cfg.experiment,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "seeds": dict(cfg.seeds),
        "versions": {
            "vbsens": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "jax": jax.__version__,
            "jaxlib": _version("jaxlib"),
        },
    }
    out.update(extra)
    return out


def _run_stage(report: ComparisonReport, stage: str, fn: Callable):
    try:
        return fn()
    except STAGE_ERRORS as exc:
        log.warning("stage %s failed: %s", stage, exc)
        report.add_error(stage, exc)
        return None


def _diag_or_none(cov):
    return None if cov is None else np.diag(cov)


def _pick(arr, i):
    return None if arr is None else arr[i]


# ---------------------------------------------------------------------------
# targets built from the configuration


def random_mvn_target(dim: int, seed: int) -> MvnTarget:
    """A random SPD normal target with eigenvalues bounded away from zero."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((dim, dim))
    cov = a @ a.T / dim + 0.5 * np.eye(dim)
    return MvnTarget(rng.standard_normal(dim), cov)


def mixture_target(cfg: ExperimentConfig) -> MixtureTarget:
    t = cfg.target
    return MixtureTarget(np.asarray(t["weights"], float), np.asarray(t["means"], float), np.asarray(t["covs"], float))


def glmm_model(cfg: ExperimentConfig) -> GlmmModel:
    """Read the configured data file, or simulate data from the data seed."""
    g = cfg.glmm
    if g.get("data_path"):
        return read_glmm_data(g["data_path"], prior=cfg.prior())
    return gen_glmm_data(
        int(g["n_groups"]),
        int(g["max_group_size"]),
        np.asarray(g["beta_true"], dtype=float),
        float(g["mu_true"]),
        float(g["tau_true"]),
        cfg.seeds["data"],
        group_level_covariates=int(g.get("group_level_covariates", 0)),
        prior=cfg.prior(),
    )


def oracle_moments(target: MixtureTarget, n: int, seed: int) -> dict[str, np.ndarray]:
    """Direct-sampling moments with standard errors.

    The variance standard error uses the fourth central moment,
    ``sqrt((m4 - var^2) / n)``.
    """
    x = target.sample(np.random.default_rng(seed), n)
    mean = x.mean(axis=0)
    xc = x - mean
    var = (xc**2).sum(axis=0) / (n - 1)
    m4 = (xc**4).mean(axis=0)
    return {
        "mean": mean,
        "mean_se": np.sqrt(var / n),
        "var": var,
        "var_se": np.sqrt(np.maximum(m4 - var**2, 0.0) / n),
        "cov": np.cov(x, rowvar=False).reshape(target.dim, target.dim),
    }


# ---------------------------------------------------------------------------
# experiments


def run_mvn_exactness(cfg: ExperimentConfig) -> ComparisonReport:
    dim = int(cfg.mvn["dim"])
    target = random_mvn_target(dim, cfg.seeds["data"])
    report = ComparisonReport(cfg.experiment, provenance=provenance(cfg))
    labels = [f"theta_{i + 1}" for i in range(dim)]
    opt = cfg.optimizer_config()
    obj = MvnClosedKL(target)
    fit = _run_stage(report, "fit", lambda: minimize(obj.at(), obj.layout.initial(), opt))
    cov_lr = None
    if fit is not None:
        sys = _run_stage(report, "lrvb", lambda: build_system(obj, fit, Query.identity(range(dim), labels), cfg=opt))
        cov_lr = None if sys is None else _run_stage(report, "lrvb", lambda: lrvb_covariance(sys))
    lap = _run_stage(report, "laplace", lambda: laplace_fit(target.log_density, np.zeros(dim), opt))
    lap_cov = None if lap is None else lap.cov
    mf_mean = None if fit is None else fit.x[:dim]
    mf_var = None if fit is None else np.exp(2.0 * fit.x[dim:])
    lr_var = _diag_or_none(cov_lr)
    lap_var = _diag_or_none(lap_cov)
    for i, lab in enumerate(labels):
        report.add_row(lab, "mean", exact=target.mean[i], mfvb=_pick(mf_mean, i), lrvb=_pick(mf_mean, i),
                       laplace=None if lap is None else lap.theta_hat[i])
        report.add_row(lab, "var", exact=target.cov[i, i], mfvb=_pick(mf_var, i), lrvb=_pick(lr_var, i),
                       laplace=_pick(lap_var, i))
    report.add_table("cov_exact", target.cov, labels, labels)
    if cov_lr is not None:
        report.add_table("cov_lrvb", cov_lr, labels, labels)
    diag = {"dim": dim}
    if fit is not None:
        diag.update(
            fit_converged=fit.converged,
            fit_iterations=fit.n_iter,
            max_mean_error=float(np.max(np.abs(mf_mean - target.mean))),
            max_mfvb_var_error=float(np.max(np.abs(mf_var - 1.0 / np.diag(target.precision)))),
        )
    if cov_lr is not None:
        diag["max_lrvb_cov_error"] = float(np.max(np.abs(cov_lr - target.cov)))
    report.diagnostics = diag
    return report


def run_mixture(cfg: ExperimentConfig) -> ComparisonReport:
    target = mixture_target(cfg)
    dim = target.dim
    labels = [f"theta_{i + 1}" for i in range(dim)]
    report = ComparisonReport(cfg.experiment, provenance=provenance(cfg, n_draws=cfg.n_draws,
                                                                   oracle_draws=cfg.oracle_draws))
    opt = cfg.optimizer_config()
    obj = FixedDrawKL(target, cfg.n_draws, seed=cfg.seeds["draws"])
    fit = _run_stage(report, "fit", lambda: minimize(obj.at(), obj.layout.initial(), opt))
    cov_lr = sys = None
    if fit is not None:
        sys = _run_stage(report, "lrvb", lambda: build_system(obj, fit, Query.identity(range(dim), labels), cfg=opt))
        cov_lr = None if sys is None else _run_stage(report, "lrvb", lambda: lrvb_covariance(sys))
    # The MAP search starts from the MFVB mean so that it lands in the same mode.
    x0 = np.zeros(dim) if fit is None else fit.x[:dim]
    lap = _run_stage(report, "laplace", lambda: laplace_fit(target.log_density, x0, opt))
    oracle = oracle_moments(target, int(cfg.oracle_draws), cfg.seeds["oracle"])

    mf_mean = None if fit is None else fit.x[:dim]
    mf_var = None if fit is None else np.exp(2.0 * fit.x[dim:])
    lr_var = _diag_or_none(cov_lr)
    lap_var = None if lap is None else _diag_or_none(lap.cov)
    for i, lab in enumerate(labels):
        report.add_row(lab, "mean", exact=oracle["mean"][i], exact_se=oracle["mean_se"][i], mfvb=_pick(mf_mean, i),
                       lrvb=_pick(mf_mean, i), laplace=None if lap is None else lap.theta_hat[i])
        report.add_row(lab, "var", exact=oracle["var"][i], exact_se=oracle["var_se"][i], mfvb=_pick(mf_var, i),
                       lrvb=_pick(lr_var, i), laplace=_pick(lap_var, i))
    report.add_table("cov_oracle", oracle["cov"], labels, labels)
    if cov_lr is not None:
        report.add_table("cov_lrvb", cov_lr, labels, labels)
    diag: dict = {"dim": dim}
    if fit is not None:
        diag.update(fit_converged=fit.converged, fit_iterations=fit.n_iter)
    if lap is not None:
        diag["laplace_degenerate"] = lap.degenerate
    if cov_lr is not None:
        adequacy = _run_stage(report, "adequacy", lambda: adequacy_check(obj, sys, cov_lr))
        if adequacy is not None:
            diag["adequacy"] = {
                "adequate": adequacy.adequate,
                "max_ratio": float(np.max(adequacy.sampling_sd / adequacy.posterior_sd)),
                "threshold": adequacy.threshold,
            }
    report.diagnostics = diag
    return report


@dataclass
class GlmmFit:
    """The MFVB/LRVB part of a GLMM run, reused by the CLI and sweeps."""

    model: GlmmModel
    objective: GlmmKL
    fit: object
    query: Query
    labels: list[str]
    mean: np.ndarray
    cov_lr: np.ndarray
    sensitivity: np.ndarray
    directions: list[str]
    system: object = field(repr=False, default=None)


def glmm_query(model: GlmmModel) -> Query:
    labels = model.theta_labels()
    return Query.identity(range(model.theta_dim), labels)


def fit_glmm(cfg: ExperimentConfig, model: GlmmModel | None = None, x0=None) -> GlmmFit:
    """Fit MFVB, then assemble the LRVB covariance and prior sensitivities."""
    model = model if model is not None else glmm_model(cfg)
    opt = cfg.optimizer_config()
    obj = GlmmKL(model, GaussHermiteRule(int(cfg.gh_points)))
    fit = minimize(obj.at(), obj.layout.initial() if x0 is None else x0, opt)
    query = glmm_query(model)
    sys = build_system(obj, fit, query, cfg=opt)
    cov = lrvb_covariance(sys)
    dirs = list(cfg.sensitivity["directions"])
    cols = [ALPHA_NAMES.index(d) for d in dirs]
    s = sensitivity(sys)[:, cols]
    mean = np.asarray(expect_g(obj.layout, fit.x, query))
    return GlmmFit(model, obj, fit, query, list(query.labels), mean, cov, s, dirs, sys)


def glmm_chain(cfg: ExperimentConfig, model: GlmmModel, start=None) -> ChainOutput:
    """Pilot chain for the proposal covariance, then the main chain.

    Both run on (beta, mu, log tau, u). The per-draw d rho / d alpha for the
    seven prior parameters is attached in the constrained parametrization.
    """
    mc = cfg.mcmc
    seed = cfg.seeds["mcmc"]
    lp = jax.jit(lambda x: glmm_log_joint_unconstrained(model, x))
    x0 = np.zeros(model.theta_dim) if start is None else np.asarray(start, dtype=float)
    pilot = rwm_sample(lp, x0, int(mc["pilot_draws"]), int(mc["pilot_warmup"]), None, seed=seed,
                       thin=int(mc["pilot_thin"]))
    prop = np.cov(pilot.draws, rowvar=False)
    chain = rwm_sample(lp, pilot.draws[-1], int(mc["n_draws"]), int(mc["warmup"]), prop, seed=seed + 1,
                       thin=int(mc["thin"]))
    theta = constrained_draws(model, chain.draws)
    chain.drho = np.asarray(glmm_prior_dalpha(model, theta))
    chain.metadata = {"pilot_acceptance_rate": pilot.acceptance_rate, "parametrization": "log_tau"}
    return chain


def constrained_draws(model: GlmmModel, x: np.ndarray) -> np.ndarray:
    theta = np.array(x, dtype=np.float64, copy=True)
    theta[:, model.k_x + 1] = np.exp(theta[:, model.k_x + 1])
    return theta


def _mfvb_start(model: GlmmModel, gf: GlmmFit | None) -> np.ndarray | None:
    if gf is None:
        return None
    x = np.array(gf.mean, dtype=np.float64, copy=True)
    x[model.k_x + 1] = np.log(x[model.k_x + 1])
    return x


def offdiag_slope(cov_ref: np.ndarray, cov_est: np.ndarray) -> float:
    """Least-squares slope through the origin of reference on estimated off-diagonals."""
    iu = np.triu_indices(cov_ref.shape[0], 1)
    x, y = cov_est[iu], cov_ref[iu]
    return float(x @ y / (x @ x))


def run_glmm(cfg: ExperimentConfig, chain: ChainOutput | None = None) -> ComparisonReport:
    report = ComparisonReport(cfg.experiment, provenance=provenance(cfg))
    model = _run_stage(report, "data", lambda: glmm_model(cfg))
    if model is None:
        return report
    k = model.k_x
    tau_i = k + 1
    labels = model.theta_labels()
    gf = _run_stage(report, "fit", lambda: fit_glmm(cfg, model))

    opt = cfg.optimizer_config()
    lap = _run_stage(report, "laplace", lambda: laplace_fit(
        lambda x: glmm_log_joint_unconstrained(model, x), np.zeros(model.theta_dim), opt))
    lap_mean = lap_sd = None
    if lap is not None:
        lap_mean = np.array(lap.theta_hat, copy=True)
        lap_mean[tau_i] = np.exp(lap_mean[tau_i])
        if lap.cov is not None:
            lap_sd = np.sqrt(np.diag(lap.cov))
            lap_sd[tau_i] = lap_mean[tau_i] * lap_sd[tau_i]  # delta method from log tau

    if chain is None:
        chain = _run_stage(report, "mcmc", lambda: glmm_chain(cfg, model, _mfvb_start(model, gf)))
    mc_mean = mc_sd = mc_ess = mc_cov = None
    if chain is not None:
        theta = constrained_draws(model, chain.draws)
        mc_mean = theta.mean(axis=0)
        mc_sd = theta.std(axis=0, ddof=1)
        mc_ess = chain_ess(theta)
        mc_cov = np.cov(theta, rowvar=False)

    mf_mean = mf_sd = lr_sd = None
    if gf is not None:
        mf_mean = gf.mean
        mf_sd = np.sqrt(np.diag(q_covariance(gf.objective.layout, gf.fit.x, gf.query)))
        lr_sd = np.sqrt(np.diag(gf.cov_lr))
    for i, lab in enumerate(labels):
        se = None if mc_sd is None or mc_ess[i] <= 0 else mc_sd[i] / np.sqrt(mc_ess[i])
        report.add_row(lab, "mean", exact=_pick(mc_mean, i), exact_se=se, mfvb=_pick(mf_mean, i),
                       lrvb=_pick(mf_mean, i), laplace=_pick(lap_mean, i), ess=_pick(mc_ess, i))
        report.add_row(lab, "sd", exact=_pick(mc_sd, i), mfvb=_pick(mf_sd, i), lrvb=_pick(lr_sd, i),
                       laplace=_pick(lap_sd, i), ess=_pick(mc_ess, i))

    diag: dict = {"n_obs": model.n_obs, "n_groups": model.n_groups, "k_x": k, "y_mean": float(model.y.mean())}
    if gf is not None:
        dirs = gf.directions
        report.add_table("cov_lrvb", gf.cov_lr, labels, labels)
        report.add_table("sensitivity_lrvb", gf.sensitivity, labels, dirs)
        report.add_table("sensitivity_lrvb_normalized", normalized_sensitivity(gf.sensitivity, gf.cov_lr), labels, dirs)
        diag.update(fit_converged=gf.fit.converged, fit_iterations=gf.fit.n_iter, grad_norm=gf.fit.grad_norm)
    if lap is not None:
        diag.update(laplace_degenerate=lap.degenerate, map_tau=float(lap_mean[tau_i]))
    if chain is not None:
        dirs = list(cfg.sensitivity["directions"])
        cols = [ALPHA_NAMES.index(d) for d in dirs]
        s_mc = mcmc_sensitivity(theta, chain.drho[:, cols])
        report.add_table("cov_mcmc", mc_cov, labels, labels)
        report.add_table("sensitivity_mcmc", s_mc, labels, dirs)
        report.add_table("sensitivity_mcmc_normalized", s_mc / mc_sd[:, None], labels, dirs)
        diag.update(mcmc_acceptance_rate=chain.acceptance_rate, mcmc_draws=chain.n_draws,
                    mcmc_min_ess=float(mc_ess.min()), mcmc_mean_tau=float(mc_mean[tau_i]))
        if gf is not None:
            keep = [i for i in range(model.theta_dim) if i not in (k, tau_i)]
            diag["offdiag_slope_beta_u"] = offdiag_slope(mc_cov[np.ix_(keep, keep)], gf.cov_lr[np.ix_(keep, keep)])
    report.diagnostics = diag
    return report


RUNNERS = {
    "mvn_exactness": run_mvn_exactness,
    "mixture_skew": run_mixture,
    "mixture_overdispersed_1d": run_mixture,
    "mixture_overdispersed_2d": run_mixture,
    "glmm": run_glmm,
}


def run_experiment(cfg: ExperimentConfig) -> ComparisonReport:
    """Run the configured experiment; stage failures are recorded, not raised."""
    try:
        runner = RUNNERS[cfg.experiment]
    except KeyError:
        raise ConfigError(f"unknown experiment {cfg.experiment!r}") from None
    return runner(cfg)


# ---------------------------------------------------------------------------
# refit sweeps


@dataclass
class SweepResult:
    parameter: str
    base_value: float
    grid: np.ndarray
    labels: list[str]
    base_mean: np.ndarray
    slope: np.ndarray
    refit: np.ndarray
    predicted: np.ndarray
    converged: np.ndarray

    def to_report(self, cfg: ExperimentConfig) -> ComparisonReport:
        report = ComparisonReport("sweep", provenance=provenance(cfg, parameter=self.parameter))
        rows = [repr(float(v)) for v in self.grid]
        report.add_table("refit", self.refit, rows, self.labels)
        report.add_table("linear", self.predicted, rows, self.labels)
        report.add_table("sensitivity", self.slope[None, :], [self.parameter], self.labels)
        report.diagnostics = {
            "parameter": self.parameter,
            "base_value": self.base_value,
            "grid": self.grid.tolist(),
            "converged": self.converged.tolist(),
        }
        for i, ok in enumerate(self.converged):
            if not ok:
                report.errors.append({"stage": "refit", "error": "NonConvergenceError",
                                      "message": f"refit did not converge at {self.parameter} = {self.grid[i]!r}"})
        return report


def refit_sweep(cfg: ExperimentConfig, parameter: str, grid, base: GlmmFit | None = None) -> SweepResult:
    """Warm-started refits along one prior parameter, with linear predictions.

    Each grid point starts from the previous optimum (the first from the
    base optimum). A point that fails to converge is flagged and its row is
    NaN; the sweep continues from the last converged optimum.
    """
    if parameter not in ALPHA_NAMES:
        raise ConfigError(f"unknown prior parameter {parameter!r}")
    j = ALPHA_NAMES.index(parameter)
    if base is None:
        base = fit_glmm(cfg.replace(sensitivity={"directions": list(ALPHA_NAMES)}))
    slope = sensitivity(base.system)[:, j]
    alpha0 = base.objective.alpha0
    opt = cfg.optimizer_config()
    grid = np.asarray(grid, dtype=np.float64).ravel()
    refit = np.full((grid.size, base.mean.size), np.nan)
    converged = np.zeros(grid.size, dtype=bool)
    x = base.fit.x
    for i, val in enumerate(grid):
        alpha = alpha0.copy()
        alpha[j] = val
        try:
            res = minimize(base.objective.at(alpha), x, opt)
        except STAGE_ERRORS as exc:
            log.warning("refit at %s = %r failed: %s", parameter, val, exc)
            continue
        if not res.converged:
            continue
        converged[i] = True
        refit[i] = np.asarray(expect_g(base.objective.layout, res.x, base.query))
        x = res.x
    predicted = base.mean[None, :] + np.outer(grid - alpha0[j], slope)
    return SweepResult(parameter, float(alpha0[j]), grid, base.labels, base.mean, slope, refit, predicted, converged)
