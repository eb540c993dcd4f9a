"""Synthetic logistic-GLMM data."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from vbsens.targets.glmm import GlmmModel, GlmmPrior


def gen_glmm_data(
    n_groups: int,
    max_group_size: int,
    beta_true,
    mu_true: float,
    tau_true: float,
    seed: int,
    group_level_covariates: int = 0,
    prior: GlmmPrior | None = None,
) -> GlmmModel:
    """Simulate grouped binary data.

    Group sizes are uniform on {1, ..., max_group_size}, covariates are
    standard normal and u_t ~ N(mu_true, 1 / tau_true). The first
    ``group_level_covariates`` columns are drawn once per group and shared by
    all of that group's rows, which makes their coefficients compete with
    the random effects.
    """
    if tau_true <= 0:
        raise ValueError("tau_true must be positive")
    if n_groups < 1 or max_group_size < 1:
        raise ValueError("need at least one group and one row per group")
    beta_true = np.atleast_1d(np.asarray(beta_true, dtype=np.float64))
    k_x = beta_true.size
    if not 0 <= group_level_covariates <= k_x:
        raise ValueError("group_level_covariates must lie in [0, K_x]")
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, max_group_size + 1, size=n_groups)
    group = np.repeat(np.arange(n_groups), sizes)
    x = rng.standard_normal((group.size, k_x))
    if group_level_covariates:
        x[:, :group_level_covariates] = rng.standard_normal((n_groups, group_level_covariates))[group]
    u = mu_true + rng.standard_normal(n_groups) / np.sqrt(tau_true)
    y = (rng.uniform(size=group.size) < expit(x @ beta_true + u[group])).astype(np.float64)
    return GlmmModel(x, y, group, n_groups, prior or GlmmPrior())
