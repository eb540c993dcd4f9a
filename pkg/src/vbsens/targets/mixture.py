"""Normal-mixture and multivariate-normal targets with linear tilting."""

from __future__ import annotations

from dataclasses import dataclass, field

import jax.numpy as jnp
import numpy as np
from jax.scipy.special import logsumexp

from vbsens.errors import LayoutError, NotPositiveDefiniteError

LOG_2PI = float(np.log(2.0 * np.pi))


def _mvn_logpdf_parts(mean: np.ndarray, cov: np.ndarray):
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("component covariance is not positive definite") from exc
    prec_chol = np.linalg.inv(chol)  # L^{-1}; (x-m)' S^{-1} (x-m) = |L^{-1}(x-m)|^2
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return prec_chol, logdet


@dataclass(frozen=True)
class MvnTarget:
    mean: np.ndarray
    cov: np.ndarray
    precision: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.shape != (mean.size, mean.size):
            raise LayoutError(f"covariance shape {cov.shape} does not match mean length {mean.size}")
        cov = 0.5 * (cov + cov.T)
        prec_chol, logdet = _mvn_logpdf_parts(mean, cov)
        precision = prec_chol.T @ prec_chol
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "precision", 0.5 * (precision + precision.T))
        object.__setattr__(self, "_prec_chol", prec_chol)
        object.__setattr__(self, "_logdet", logdet)

    @property
    def dim(self) -> int:
        return self.mean.size

    def log_density(self, theta):
        """Normalized log density; ``theta`` has trailing axis ``dim``."""
        r = (jnp.asarray(theta) - self.mean) @ self._prec_chol.T
        return -0.5 * jnp.sum(r**2, axis=-1) - 0.5 * (self._logdet + self.dim * LOG_2PI)

    def tilted_mean(self, alpha_full) -> np.ndarray:
        """Mean of N(mean, cov) tilted by exp(alpha' theta)."""
        return self.mean + self.cov @ np.asarray(alpha_full, dtype=np.float64)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.multivariate_normal(self.mean, self.cov, size=n, method="cholesky")


@dataclass(frozen=True)
class MixtureTarget:
    """sum_k w_k N(theta; m_k, S_k), evaluated with log-sum-exp."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        kz, k = means.shape
        covs = np.asarray(self.covs, dtype=np.float64).reshape(kz, k, k)
        if w.size != kz:
            raise LayoutError(f"{w.size} weights for {kz} components")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to one")
        parts = [_mvn_logpdf_parts(m, c) for m, c in zip(means, covs)]
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)
        object.__setattr__(self, "_prec_chols", np.stack([p[0] for p in parts]))
        object.__setattr__(
            self,
            "_log_consts",
            np.log(w) - 0.5 * np.array([p[1] for p in parts]) - 0.5 * k * LOG_2PI,
        )

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def log_density(self, theta):
        theta = jnp.asarray(theta)
        diff = theta[..., None, :] - self.means  # (..., kz, k)
        r = jnp.einsum("zij,...zj->...zi", self._prec_chols, diff)
        return logsumexp(self._log_consts - 0.5 * jnp.sum(r**2, axis=-1), axis=-1)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Direct draws: component label, then a normal draw."""
        z = rng.choice(self.n_components, size=n, p=self.weights)
        chols = np.linalg.cholesky(self.covs)
        eps = rng.standard_normal((n, self.dim))
        return self.means[z] + np.einsum("nij,nj->ni", chols[z], eps)

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Exact mean and covariance of the mixture."""
        mean = self.weights @ self.means
        second = np.einsum("z,zij->ij", self.weights, self.covs + np.einsum("zi,zj->zij", self.means, self.means))
        return mean, second - np.outer(mean, mean)


@dataclass(frozen=True)
class TiltingPerturbation:
    """rho(theta, alpha) = alpha' theta[coords]; zero at alpha = 0."""

    coords: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "coords", tuple(int(c) for c in self.coords))

    @property
    def dim(self) -> int:
        return len(self.coords)

    def rho(self, theta, alpha):
        return jnp.asarray(theta)[..., list(self.coords)] @ jnp.asarray(alpha)

    def d_rho_d_alpha(self, theta):
        return jnp.asarray(theta)[..., list(self.coords)]

    def full_alpha(self, alpha, dim: int) -> np.ndarray:
        out = np.zeros(dim)
        out[list(self.coords)] = np.asarray(alpha, dtype=np.float64)
        return out


def perturbed_log_density(base, pert: TiltingPerturbation, alpha, theta):
    """Unnormalized log p0(theta) + rho(theta, alpha)."""
    return base.log_density(theta) + pert.rho(theta, alpha)


def d_rho_d_alpha(pert: TiltingPerturbation, theta):
    return pert.d_rho_d_alpha(theta)


@dataclass(frozen=True)
class TiltedTarget:
    """Pairs a base target with a tilting so objectives see log p(theta | alpha)."""

    base: object
    pert: TiltingPerturbation

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def alpha_dim(self) -> int:
        return self.pert.dim

    def log_density(self, theta, alpha=None):
        if alpha is None:
            return self.base.log_density(theta)
        return perturbed_log_density(self.base, self.pert, alpha, theta)

    def d_rho_d_alpha(self, theta):
        return self.pert.d_rho_d_alpha(theta)
