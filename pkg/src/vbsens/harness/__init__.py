"""Experiment driver: configuration, synthetic data, comparison runs and reports."""

from vbsens.harness.config import KINDS, MIXTURES, ExperimentConfig, default_document, load_config
from vbsens.harness.data import gen_glmm_data
from vbsens.harness.experiments import (
    GlmmFit,
    SweepResult,
    fit_glmm,
    glmm_chain,
    offdiag_slope,
    oracle_moments,
    refit_sweep,
    run_experiment,
)
from vbsens.harness.report import ComparisonReport, emit_report, load_report

__all__ = [
    "KINDS",
    "MIXTURES",
    "ComparisonReport",
    "ExperimentConfig",
    "GlmmFit",
    "SweepResult",
    "default_document",
    "emit_report",
    "fit_glmm",
    "gen_glmm_data",
    "glmm_chain",
    "load_config",
    "load_report",
    "offdiag_slope",
    "oracle_moments",
    "refit_sweep",
    "run_experiment",
]
