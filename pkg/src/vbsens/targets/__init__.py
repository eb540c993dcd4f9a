"""Target posteriors, their perturbations, and supporting expectations."""

from vbsens.targets.glmm import (
    ALPHA_NAMES,
    GlmmModel,
    GlmmPrior,
    glmm_expected_log_prior,
    glmm_layout,
    glmm_log_joint,
    glmm_log_joint_unconstrained,
    glmm_prior_dalpha,
    glmm_rho_moments,
    read_glmm_data,
    write_glmm_data,
)
from vbsens.targets.lkj import lkj_expected_logdet_R, lkj_f_alpha_eta, multidigamma
from vbsens.targets.mixture import (
    MixtureTarget,
    MvnTarget,
    TiltedTarget,
    TiltingPerturbation,
    d_rho_d_alpha,
    perturbed_log_density,
)
from vbsens.targets.quadrature import GaussHermiteRule, gh_expect_log1mp

__all__ = [
    "ALPHA_NAMES",
    "GaussHermiteRule",
    "GlmmModel",
    "GlmmPrior",
    "MixtureTarget",
    "MvnTarget",
    "TiltedTarget",
    "TiltingPerturbation",
    "d_rho_d_alpha",
    "gh_expect_log1mp",
    "glmm_expected_log_prior",
    "glmm_layout",
    "glmm_log_joint",
    "glmm_log_joint_unconstrained",
    "glmm_prior_dalpha",
    "glmm_rho_moments",
    "lkj_expected_logdet_R",
    "lkj_f_alpha_eta",
    "multidigamma",
    "perturbed_log_density",
    "read_glmm_data",
    "write_glmm_data",
]
