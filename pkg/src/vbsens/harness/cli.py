"""Command-line entry point: ``vbsens <subcommand> --config FILE``.

Exit codes: 0 on success, 2 for configuration errors, 3 when a stage fails
(a partial report is still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import jax
import numpy as np

from vbsens.baselines import ess as chain_ess
from vbsens.baselines import laplace_fit, rwm_sample
from vbsens.errors import ConfigError, VbsensError
from vbsens.family import Query, expect_g, q_covariance
from vbsens.harness.config import FORMATS, ExperimentConfig, load_config
from vbsens.harness.experiments import (
    STAGE_ERRORS,
    constrained_draws,
    glmm_chain,
    glmm_model,
    glmm_query,
    mixture_target,
    provenance,
    random_mvn_target,
    refit_sweep,
    run_experiment,
)
from vbsens.harness.report import ComparisonReport, emit_report
from vbsens.lrvb import build_system, lrvb_covariance, normalized_sensitivity, sensitivity
from vbsens.objectives import FixedDrawKL, GlmmKL, MvnClosedKL
from vbsens.optimize import minimize
from vbsens.targets.glmm import ALPHA_NAMES, glmm_log_joint_unconstrained, write_glmm_data
from vbsens.targets.mixture import TiltingPerturbation
from vbsens.targets.quadrature import GaussHermiteRule

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
SUBCOMMANDS = ("fit", "lrvb", "sensitivity", "mcmc", "laplace", "compare", "sweep", "gen-data")

log = logging.getLogger("vbsens")


class _Problem:
    """Objective, query and log density for the configured experiment."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        kind = cfg.experiment
        self.model = None
        if kind == "glmm":
            self.model = glmm_model(cfg)
            self.objective = GlmmKL(self.model, GaussHermiteRule(int(cfg.gh_points)))
            self.query = glmm_query(self.model)
            self.alpha_labels = list(ALPHA_NAMES)
            self.log_density = jax.jit(lambda x: glmm_log_joint_unconstrained(self.model, x))
            self.dim = self.model.theta_dim
            return
        if kind == "mvn_exactness":
            target = random_mvn_target(int(cfg.mvn["dim"]), cfg.seeds["data"])
        else:
            target = mixture_target(cfg)
        self.dim = target.dim
        labels = [f"theta_{i + 1}" for i in range(self.dim)]
        pert = TiltingPerturbation(tuple(range(self.dim)))
        if kind == "mvn_exactness":
            self.objective = MvnClosedKL(target, pert)
        else:
            self.objective = FixedDrawKL(target, int(cfg.n_draws), seed=cfg.seeds["draws"], pert=pert)
        self.query = Query.identity(range(self.dim), labels)
        self.alpha_labels = [f"tilt_{lab}" for lab in labels]
        self.log_density = target.log_density

    @property
    def labels(self) -> list[str]:
        return list(self.query.labels)

    def fit(self, verbose: bool = False):
        trace = sys.stderr if verbose else None
        opt = self.cfg.optimizer_config()
        return minimize(self.objective.at(), self.objective.layout.initial(), opt, trace_stream=trace)

    def system(self, fit):
        return build_system(self.objective, fit, self.query, cfg=self.cfg.optimizer_config())


def _fit_document(cfg: ExperimentConfig, prob: _Problem, fit) -> dict:
    return {
        "layout": prob.objective.layout.to_records(),
        "eta": np.asarray(fit.x).tolist(),
        "objective": float(fit.fun),
        "grad_norm": float(fit.grad_norm),
        "iterations": int(fit.n_iter),
        "converged": bool(fit.converged),
        "degenerate": bool(fit.degenerate),
        "message": fit.message,
        "labels": prob.labels,
        "means": np.asarray(expect_g(prob.objective.layout, fit.x, prob.query)).tolist(),
        "provenance": provenance(cfg),
    }


def _report_rows(report: ComparisonReport, prob: _Problem, fit, cov_lr=None) -> None:
    means = np.asarray(expect_g(prob.objective.layout, fit.x, prob.query))
    q_sd = np.sqrt(np.diag(q_covariance(prob.objective.layout, fit.x, prob.query)))
    lr_sd = None if cov_lr is None else np.sqrt(np.diag(cov_lr))
    for i, lab in enumerate(prob.labels):
        report.add_row(lab, "mean", mfvb=means[i], lrvb=means[i])
        report.add_row(lab, "sd", mfvb=q_sd[i], lrvb=None if lr_sd is None else lr_sd[i])


def cmd_fit(cfg, args) -> dict:
    prob = _Problem(cfg)
    fit = prob.fit(args.verbose)
    return _fit_document(cfg, prob, fit)


def cmd_lrvb(cfg, args) -> ComparisonReport:
    report = ComparisonReport(cfg.experiment, provenance=provenance(cfg, command="lrvb"))
    prob = _Problem(cfg)
    fit = prob.fit(args.verbose)
    cov = None
    try:
        cov = lrvb_covariance(prob.system(fit))
        report.add_table("cov_lrvb", cov, prob.labels, prob.labels)
    except STAGE_ERRORS as exc:
        report.add_error("lrvb", exc)
    _report_rows(report, prob, fit, cov)
    report.diagnostics = {"fit_converged": fit.converged, "grad_norm": fit.grad_norm}
    return report


def cmd_sensitivity(cfg, args) -> ComparisonReport:
    report = ComparisonReport(cfg.experiment, provenance=provenance(cfg, command="sensitivity"))
    prob = _Problem(cfg)
    fit = prob.fit(args.verbose)
    try:
        sys_ = prob.system(fit)
        cov = lrvb_covariance(sys_)
        s = sensitivity(sys_)
        cols = list(range(s.shape[1]))
        names = prob.alpha_labels
        if cfg.experiment == "glmm":
            names = list(cfg.sensitivity["directions"])
            cols = [ALPHA_NAMES.index(d) for d in names]
        s = s[:, cols]
        report.add_table("sensitivity", s, prob.labels, names)
        report.add_table("sensitivity_normalized", normalized_sensitivity(s, cov), prob.labels, names)
        _report_rows(report, prob, fit, cov)
    except STAGE_ERRORS as exc:
        report.add_error("sensitivity", exc)
    report.diagnostics = {"fit_converged": fit.converged, "grad_norm": fit.grad_norm}
    return report


def cmd_laplace(cfg, args) -> ComparisonReport:
    report = ComparisonReport(cfg.experiment, provenance=provenance(cfg, command="laplace"))
    prob = _Problem(cfg)
    try:
        lap = laplace_fit(prob.log_density, np.zeros(prob.dim), cfg.optimizer_config())
    except STAGE_ERRORS as exc:
        report.add_error("laplace", exc)
        return report
    sd = lap.sd
    for i, lab in enumerate(prob.labels):
        report.add_row(lab, "mode", laplace=lap.theta_hat[i])
        report.add_row(lab, "sd", laplace=None if sd is None else sd[i])
    if lap.cov is not None:
        report.add_table("cov_laplace", lap.cov, prob.labels, prob.labels)
    report.diagnostics = {"degenerate": lap.degenerate, "converged": lap.fit.converged,
                          "parametrization": "log_tau" if prob.model is not None else "identity"}
    return report


def cmd_mcmc(cfg, args) -> ComparisonReport:
    report = ComparisonReport(cfg.experiment, provenance=provenance(cfg, command="mcmc"))
    prob = _Problem(cfg)
    try:
        if prob.model is not None:
            chain = glmm_chain(cfg, prob.model)
            theta = constrained_draws(prob.model, chain.draws)
        else:
            mc = cfg.mcmc or {"n_draws": 5000, "warmup": 5000, "thin": 10}
            chain = rwm_sample(prob.log_density, np.zeros(prob.dim), int(mc["n_draws"]), int(mc["warmup"]),
                               seed=cfg.seeds["mcmc"], thin=int(mc["thin"]))
            theta = chain.draws
    except STAGE_ERRORS as exc:
        report.add_error("mcmc", exc)
        return report
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chain.save(out / "chain.npz")
    ess = chain_ess(theta)
    mean, sd = theta.mean(axis=0), theta.std(axis=0, ddof=1)
    for i, lab in enumerate(prob.labels):
        report.add_row(lab, "mean", exact=mean[i], exact_se=sd[i] / np.sqrt(max(ess[i], 1.0)), ess=ess[i])
        report.add_row(lab, "sd", exact=sd[i], ess=ess[i])
    report.diagnostics = {"acceptance_rate": chain.acceptance_rate, "draws": chain.n_draws, "chain_file": "chain.npz"}
    return report


def cmd_compare(cfg, args) -> ComparisonReport:
    return run_experiment(cfg)


def cmd_sweep(cfg, args) -> ComparisonReport:
    if cfg.experiment != "glmm":
        raise ConfigError("sweep is defined for the glmm experiment")
    res = refit_sweep(cfg, cfg.sweep["parameter"], cfg.sweep["grid"])
    return res.to_report(cfg)


def cmd_gen_data(cfg, args) -> dict:
    if cfg.experiment != "glmm":
        raise ConfigError("gen-data is defined for the glmm experiment")
    model = glmm_model(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_glmm_data(model, out / "data.csv")
    return {"file": "data.csv", "n_obs": model.n_obs, "n_groups": model.n_groups, "provenance": provenance(cfg)}


COMMANDS = {
    "fit": cmd_fit,
    "lrvb": cmd_lrvb,
    "sensitivity": cmd_sensitivity,
    "mcmc": cmd_mcmc,
    "laplace": cmd_laplace,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
    "gen-data": cmd_gen_data,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vbsens", description="Linear-response VB covariances and prior sensitivity.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML or JSON experiment configuration")
        p.add_argument("--out", default=None, help="output directory (default: output.dir from the config)")
        p.add_argument("--format", choices=FORMATS, default=None, help="report format (default from the config)")
        p.add_argument("--seed", type=int, default=None, help="override every seed (seed, seed+1, ...)")
        p.add_argument("--verbose", action="store_true", help="log progress and the optimizer trace to stderr")
    return parser


def _write_json(doc: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    args.out = args.out or cfg.output["dir"]
    fmt = args.format or cfg.output["format"]
    try:
        result = COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (VbsensError, *STAGE_ERRORS) as exc:
        print(f"{args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    if isinstance(result, ComparisonReport):
        files = emit_report(result, fmt, args.out)
        for f in files:
            log.info("wrote %s", f)
        if result.failed:
            for err in result.errors:
                print(f"stage {err['stage']} failed: {err['error']}: {err['message']}", file=sys.stderr)
            return EXIT_STAGE
        return EXIT_OK
    name = "fit.json" if args.command == "fit" else "data_manifest.json"
    _write_json(result, Path(args.out) / name)
    if args.command == "fit" and not result["converged"]:
        print(f"fit did not converge: {result['message']}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
