"""Expected log-determinant of a correlation matrix under an inverse-Wishart q.

For Sigma ~ InverseWishart(scale, nu) with K x K scale and R its correlation
matrix, E[log|R|] has a closed form in log|scale|, the diagonal of the scale,
and (multivariate) digamma functions. Its derivative with respect to
(upper triangle of scale, nu) is the f_alpha_eta row for an LKJ concentration
perturbation.
"""

from __future__ import annotations

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import digamma

from vbsens.errors import DomainError


def multidigamma(x, k: int):
    """psi_K(x) = sum_{i=1}^{K} psi(x + (1 - i) / 2)."""
    return sum(digamma(x + 0.5 * (1 - i)) for i in range(1, k + 1))


def _check(scale, nu):
    scale = np.asarray(scale, dtype=np.float64)
    k = scale.shape[0]
    if scale.shape != (k, k):
        raise DomainError("scale must be a square matrix")
    if not nu > k - 1:
        raise DomainError(f"degrees of freedom {nu} must exceed K - 1 = {k - 1}")
    if np.any(np.linalg.eigvalsh(0.5 * (scale + scale.T)) <= 0):
        raise DomainError("scale matrix is not positive definite")
    return scale, k


def _expected_logdet_r(scale, nu, k):
    _, logdet = jnp.linalg.slogdet(scale)
    return (
        logdet
        - multidigamma(nu / 2.0, k)
        - jnp.sum(jnp.log(jnp.diag(scale)))
        + k * digamma((nu - k + 1.0) / 2.0)
    )


def lkj_expected_logdet_R(scale, nu: float) -> float:
    """E_q[log|R|] for q(Sigma) = InverseWishart(scale, nu)."""
    scale, k = _check(scale, nu)
    return float(_expected_logdet_r(jnp.asarray(scale), float(nu), k))


def upper_triangle(scale) -> np.ndarray:
    k = np.shape(scale)[0]
    return np.asarray(scale)[np.triu_indices(k)]


def from_upper_triangle(values, k: int):
    iu = np.triu_indices(k)
    m = jnp.zeros((k, k)).at[iu].set(values)
    return m + m.T - jnp.diag(jnp.diag(m))


def lkj_eta(scale, nu) -> np.ndarray:
    """Stacked (upper triangle of scale, nu)."""
    return np.append(upper_triangle(scale), float(nu))


def lkj_expected_logdet_from_eta(eta, k: int):
    return _expected_logdet_r(from_upper_triangle(eta[:-1], k), eta[-1], k)


def lkj_f_alpha_eta(scale, nu: float) -> np.ndarray:
    """Gradient of E_q[log|R|] w.r.t. (upper triangle of scale, nu)."""
    scale, k = _check(scale, nu)
    eta = jnp.asarray(lkj_eta(scale, nu))
    return np.asarray(jax.grad(lkj_expected_logdet_from_eta)(eta, k))
