"""Logistic GLMM with a normal random intercept per group.

Model::

    y_it | beta, u_t ~ Bernoulli(logistic(x_it' beta + u_t))
    u_t | mu, tau    ~ N(mu, 1 / tau)
    mu               ~ N(mu0, 1 / tau_mu)
    tau              ~ Gamma(shape=a_tau, rate=b_tau)
    beta             ~ N(beta0 * 1, P^{-1}),  P = tau_beta I + gamma_beta (11' - I)

Log densities keep only theta-dependent terms; normalizers that depend on the
hyperparameters alone are dropped because they cancel in every covariance and
every eta-derivative computed downstream.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import jax.numpy as jnp
import numpy as np

from vbsens.errors import DataError, LayoutError
from vbsens.family import GAMMA, NORMAL, FactorSpec, Layout, gamma_moments, normal_moments

ALPHA_NAMES = ("beta0", "tau_beta", "gamma_beta", "mu0", "tau_mu", "a_tau", "b_tau")


@dataclass(frozen=True)
class GlmmPrior:
    beta0: float = 0.0
    tau_beta: float = 0.1
    gamma_beta: float = 0.0
    mu0: float = 0.0
    tau_mu: float = 0.01
    a_tau: float = 3.0
    b_tau: float = 3.0

    def __post_init__(self):
        for name in ("tau_beta", "tau_mu", "a_tau", "b_tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in ALPHA_NAMES], dtype=np.float64)

    @classmethod
    def from_vector(cls, alpha) -> "GlmmPrior":
        return cls(**{n: float(a) for n, a in zip(ALPHA_NAMES, alpha)})

    def replace(self, **kw) -> "GlmmPrior":
        d = {n: getattr(self, n) for n in ALPHA_NAMES}
        d.update(kw)
        return GlmmPrior(**d)


def beta_precision(alpha, k: int):
    """Prior precision of beta: tau_beta on the diagonal, gamma_beta elsewhere."""
    tau_beta, gamma_beta = alpha[1], alpha[2]
    eye = jnp.eye(k)
    return tau_beta * eye + gamma_beta * (jnp.ones((k, k)) - eye)


@dataclass(frozen=True)
class GlmmModel:
    """Data plus prior. ``group`` holds 0-based group ids in [0, n_groups)."""

    x: np.ndarray
    y: np.ndarray
    group: np.ndarray
    n_groups: int
    prior: GlmmPrior = field(default_factory=GlmmPrior)

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        group = np.asarray(self.group, dtype=np.int64).reshape(-1)
        if x.shape[0] != y.size or group.size != y.size:
            if not (y.size == 0 and group.size == 0):
                raise DataError("x, y and group must have one row per observation")
        if y.size == 0:
            x = x.reshape(0, x.shape[-1])
        if np.any((y != 0) & (y != 1)):
            raise DataError("responses must be 0 or 1")
        if self.n_groups < 1:
            raise DataError("need at least one group")
        if group.size and (group.min() < 0 or group.max() >= self.n_groups):
            raise DataError(f"group index out of range [0, {self.n_groups})")
        p = np.asarray(beta_precision(self.prior.vector(), x.shape[1]))
        if np.any(np.linalg.eigvalsh(p) <= 0):
            raise DataError("prior precision on beta is not positive definite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "group", group)

    @property
    def k_x(self) -> int:
        return self.x.shape[1]

    @property
    def n_obs(self) -> int:
        return self.y.size

    @property
    def theta_dim(self) -> int:
        return self.k_x + 2 + self.n_groups

    def with_prior(self, prior: GlmmPrior) -> "GlmmModel":
        return GlmmModel(self.x, self.y, self.group, self.n_groups, prior)

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.group, minlength=self.n_groups)

    # theta = (beta[k_x], mu, tau, u[T]); unconstrained form replaces tau by log tau
    def split(self, theta):
        k = self.k_x
        return theta[..., :k], theta[..., k], theta[..., k + 1], theta[..., k + 2 :]

    def theta_labels(self, log_tau: bool = False) -> list[str]:
        return (
            [f"beta_{k + 1}" for k in range(self.k_x)]
            + ["mu", "log_tau" if log_tau else "tau"]
            + [f"u_{t + 1}" for t in range(self.n_groups)]
        )


def glmm_log_joint(model: GlmmModel, theta, alpha=None):
    """log p(y, theta | alpha) up to theta-free terms, theta = (beta, mu, tau, u)."""
    alpha = model.prior.vector() if alpha is None else alpha
    beta, mu, tau, u = model.split(jnp.asarray(theta))
    return _log_lik(model, beta, u) + _log_prior(model, beta, mu, tau, jnp.log(tau), u, alpha)


def glmm_log_joint_unconstrained(model: GlmmModel, x, alpha=None):
    """Log joint over (beta, mu, log tau, u) including the exp-transform Jacobian."""
    alpha = model.prior.vector() if alpha is None else alpha
    beta, mu, log_tau, u = model.split(jnp.asarray(x))
    tau = jnp.exp(log_tau)
    return _log_lik(model, beta, u) + _log_prior(model, beta, mu, tau, log_tau, u, alpha) + log_tau


def _log_lik(model: GlmmModel, beta, u):
    if model.n_obs == 0:
        return 0.0 * jnp.sum(beta, axis=-1)
    rho = beta @ model.x.T + u[..., model.group]
    return jnp.sum(model.y * rho - jnp.logaddexp(0.0, rho), axis=-1)


def _log_prior(model, beta, mu, tau, log_tau, u, alpha):
    beta0, _, _, mu0, tau_mu, a_tau, b_tau = (alpha[i] for i in range(7))
    t = model.n_groups
    d = beta - beta0
    p = beta_precision(alpha, model.k_x)
    lp_beta = -0.5 * jnp.einsum("...i,ij,...j->...", d, p, d)
    lp_mu = -0.5 * tau_mu * (mu - mu0) ** 2
    lp_tau = (a_tau - 1.0) * log_tau - b_tau * tau
    lp_u = 0.5 * t * log_tau - 0.5 * tau * jnp.sum((u - mu[..., None]) ** 2, axis=-1)
    return lp_beta + lp_mu + lp_tau + lp_u


def glmm_prior_dalpha(model: GlmmModel, theta, alpha=None):
    """d rho / d alpha for the seven prior hyperparameters, theta = (beta, mu, tau, u).

    Order follows :data:`ALPHA_NAMES`. Broadcasts over leading axes of theta.
    """
    alpha = model.prior.vector() if alpha is None else np.asarray(alpha)
    beta, mu, tau, _ = model.split(jnp.asarray(theta))
    beta0, _, _, mu0, tau_mu = alpha[0], alpha[1], alpha[2], alpha[3], alpha[4]
    d = beta - beta0
    p = beta_precision(alpha, model.k_x)
    sum_d = jnp.sum(d, axis=-1)
    cross = 0.5 * (sum_d**2 - jnp.sum(d**2, axis=-1))  # sum over pairs j < k
    return jnp.stack(
        [
            jnp.sum(d @ p, axis=-1),
            -0.5 * jnp.sum(d**2, axis=-1),
            -cross,
            tau_mu * (mu - mu0),
            -0.5 * (mu - mu0) ** 2,
            jnp.log(tau),
            -tau,
        ],
        axis=-1,
    )


# ---------------------------------------------------------------------------
# variational side


def glmm_layout(k_x: int, n_groups: int) -> Layout:
    """Global factors (beta, mu, tau) first, then one scalar factor per group."""
    factors = [FactorSpec("beta", NORMAL, k_x), FactorSpec("mu", NORMAL, 1), FactorSpec("tau", GAMMA, 1)]
    factors += [FactorSpec(f"u_{t + 1}", NORMAL, 1) for t in range(n_groups)]
    return Layout(tuple(factors))


def glmm_global_size(k_x: int) -> int:
    return 2 * k_x + 4


def u_moments(layout: Layout, eta, n_groups: int):
    """(means, variances) of all random effects, stacked in group order."""
    o = glmm_global_size(layout.factor("beta").length)
    pairs = jnp.reshape(eta[o : o + 2 * n_groups], (n_groups, 2))
    return pairs[:, 0], jnp.exp(2.0 * pairs[:, 1])


def glmm_rho_moments(layout: Layout, eta, x_it, group):
    """E_q and Var_q of the linear predictor x' beta + u_t.

    ``x_it`` may be a matrix of rows with a matching vector of groups.
    """
    m_b, v_b = normal_moments(layout, eta, "beta")
    if layout.factor("beta").length != np.shape(x_it)[-1]:
        raise LayoutError("covariate length does not match the beta factor")
    n_groups = len(layout.factors) - 3
    m_u, v_u = u_moments(layout, eta, n_groups)
    x_it = jnp.asarray(x_it)
    return x_it @ m_b + m_u[group], (x_it**2) @ v_b + v_u[group]


def glmm_expected_log_prior(model: GlmmModel, layout: Layout, eta, alpha):
    """E_q[log p(theta | alpha)] for the prior and random-effect terms."""
    beta0, _, _, mu0, tau_mu, a_tau, b_tau = (alpha[i] for i in range(7))
    t = model.n_groups
    m_b, v_b = normal_moments(layout, eta, "beta")
    m_mu, v_mu = normal_moments(layout, eta, "mu")
    m_mu, v_mu = m_mu[0], v_mu[0]
    e_tau, e_log_tau = gamma_moments(layout, eta, "tau")
    m_u, v_u = u_moments(layout, eta, t)

    d = m_b - beta0
    p = beta_precision(alpha, model.k_x)
    lp_beta = -0.5 * (d @ p @ d + jnp.sum(jnp.diag(p) * v_b))
    lp_mu = -0.5 * tau_mu * ((m_mu - mu0) ** 2 + v_mu)
    lp_tau = (a_tau - 1.0) * e_log_tau - b_tau * e_tau
    sq = jnp.sum((m_u - m_mu) ** 2 + v_u + v_mu)
    lp_u = 0.5 * t * e_log_tau - 0.5 * e_tau * sq
    return lp_beta + lp_mu + lp_tau + lp_u


# ---------------------------------------------------------------------------
# delimited-text data files: group_id, y, x_1..x_K (1-based group ids)


def write_glmm_data(model: GlmmModel, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group_id", "y"] + [f"x_{k + 1}" for k in range(model.k_x)])
        for g, y, row in zip(model.group, model.y, model.x):
            w.writerow([int(g) + 1, int(y)] + [repr(float(v)) for v in row])


def read_glmm_data(path, n_groups: int | None = None, prior: GlmmPrior | None = None) -> GlmmModel:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    if header[:2] != ["group_id", "y"]:
        raise DataError("data file must start with columns group_id, y")
    k_x = len(header) - 2
    arr = np.array([[float(v) for v in r] for r in body], dtype=np.float64).reshape(-1, k_x + 2)
    group = arr[:, 0].astype(np.int64) - 1
    if np.any(arr[:, 0] != np.round(arr[:, 0])):
        raise DataError("group ids must be integers")
    if n_groups is None:
        n_groups = int(group.max()) + 1 if group.size else 1
    return GlmmModel(arr[:, 2:], arr[:, 1], group, n_groups, prior or GlmmPrior())
