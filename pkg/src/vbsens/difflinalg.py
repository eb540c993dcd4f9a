"""Derivatives of scalar fields and the dense/iterative solvers built on them.

Derivatives come from JAX (reverse mode for gradients, forward-over-reverse
for Hessian-vector products). A scalar field is any function mapping a 1-d
float64 array to a scalar that JAX can trace.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np
from scipy.linalg import lapack

from vbsens.errors import (
    ConsistencyError,
    DomainError,
    NegativeCurvature,
    NonConvergenceError,
    NotPositiveDefiniteError,
)

ScalarField = Callable[[jax.Array], jax.Array]
HvpOracle = Callable[[np.ndarray], np.ndarray]

ASYMMETRY_RTOL = 1e-6


def _as_vector(x) -> jnp.ndarray:
    return jnp.asarray(x, dtype=jnp.float64).reshape(-1)


def _check_finite(values, what: str) -> np.ndarray:
    out = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise DomainError(f"non-finite {what}")
    return out


def _hvp_fn(f: ScalarField):
    grad_f = jax.grad(f)

    def hvp_(x, v):
        return jax.jvp(grad_f, (x,), (v,))[1]

    return hvp_


@dataclass(frozen=True)
class Derivatives:
    """Jit-compiled value, gradient and Hessian-vector product of one field.

    ``f(x, *args)`` is differentiated in ``x`` only; ``args`` (e.g. a
    hyperparameter vector) are passed through. Build once per objective;
    every method takes and returns numpy arrays.
    """

    f: Callable

    def __post_init__(self):
        f = self.f
        grad_f = jax.grad(f)

        def hvp_(x, v, *args):
            return jax.jvp(lambda y: grad_f(y, *args), (x,), (v,))[1]

        def hess_cols(x, *args):
            return jax.vmap(lambda e: hvp_(x, e, *args))(jnp.eye(x.shape[0]))

        object.__setattr__(self, "_value", jax.jit(f))
        object.__setattr__(self, "_grad", jax.jit(grad_f))
        object.__setattr__(self, "_value_and_grad", jax.jit(jax.value_and_grad(f)))
        object.__setattr__(self, "_hvp", jax.jit(hvp_))
        object.__setattr__(self, "_hess_cols", jax.jit(hess_cols))

    def value(self, x, *args) -> float:
        return float(_check_finite(self._value(_as_vector(x), *args), "objective value"))

    def gradient(self, x, *args) -> np.ndarray:
        return _check_finite(self._grad(_as_vector(x), *args), "gradient")

    def value_and_grad(self, x, *args) -> tuple[float, np.ndarray]:
        v, g = self._value_and_grad(_as_vector(x), *args)
        return float(_check_finite(v, "objective value")), _check_finite(g, "gradient")

    def hvp(self, x, v, *args) -> np.ndarray:
        return _check_finite(self._hvp(_as_vector(x), _as_vector(v), *args), "Hessian-vector product")

    def hessian(self, x, *args, return_asymmetry: bool = False):
        cols = _check_finite(self._hess_cols(_as_vector(x), *args), "Hessian entry")
        return _symmetrize(cols.T, return_asymmetry)

    def oracle(self, x, *args) -> HvpOracle:
        x = _as_vector(x)
        return lambda v: self.hvp(x, v, *args)

    def bind(self, *args) -> "BoundField":
        return BoundField(self, args)


@dataclass(frozen=True)
class BoundField:
    """A :class:`Derivatives` with its extra arguments fixed."""

    derivs: Derivatives
    args: tuple

    def value(self, x) -> float:
        return self.derivs.value(x, *self.args)

    def gradient(self, x) -> np.ndarray:
        return self.derivs.gradient(x, *self.args)

    def value_and_grad(self, x):
        return self.derivs.value_and_grad(x, *self.args)

    def hvp(self, x, v) -> np.ndarray:
        return self.derivs.hvp(x, v, *self.args)

    def hessian(self, x, return_asymmetry: bool = False):
        return self.derivs.hessian(x, *self.args, return_asymmetry=return_asymmetry)

    def oracle(self, x) -> HvpOracle:
        return self.derivs.oracle(x, *self.args)


def _symmetrize(a: np.ndarray, return_asymmetry: bool):
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    scale = 1.0 + (float(np.max(np.abs(a))) if a.size else 0.0)
    if asym > ASYMMETRY_RTOL * scale:
        raise ConsistencyError(f"Hessian asymmetry {asym:.3e} exceeds {ASYMMETRY_RTOL:g} * {scale:.3e}")
    sym = 0.5 * (a + a.T)
    return (sym, asym) if return_asymmetry else sym


def gradient(f: ScalarField, x) -> np.ndarray:
    """Gradient of ``f`` at ``x``; raises DomainError if f(x) is not finite."""
    x = _as_vector(x)
    value, g = jax.value_and_grad(f)(x)
    _check_finite(value, "objective value")
    return _check_finite(g, "gradient")


def hvp(f: ScalarField, x, v) -> np.ndarray:
    """Hessian of ``f`` at ``x`` applied to ``v``, without forming the Hessian."""
    return _check_finite(_hvp_fn(f)(_as_vector(x), _as_vector(v)), "Hessian-vector product")


def hessian(f: ScalarField, x, return_asymmetry: bool = False):
    """Dense Hessian assembled from Hessian-vector products with basis vectors.

    The raw column stack is symmetrized as (A + A^T) / 2. With
    ``return_asymmetry`` the max |A - A^T| seen before averaging is returned
    as a second value.
    """
    x = _as_vector(x)
    hv = _hvp_fn(f)
    cols = jax.vmap(lambda e: hv(x, e))(jnp.eye(x.shape[0]))
    return _symmetrize(_check_finite(cols, "Hessian entry").T, return_asymmetry)


def cholesky_solve(a, b) -> np.ndarray:
    """Solve ``a @ x = b`` for symmetric positive definite ``a``.

    Only the lower triangle of ``a`` is read. ``b`` may be a vector or a
    matrix of right-hand sides.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if a.shape[0] == 0:
        return b.copy()
    c, info = lapack.dpotrf(a, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise NotPositiveDefiniteError(f"non-positive pivot at index {info - 1}", pivot=info - 1)
    if info < 0:
        raise ValueError(f"illegal argument {-info} to dpotrf")
    x, info = lapack.dpotrs(c, b, lower=1)
    if info != 0:
        raise ValueError(f"dpotrs failed with info={info}")
    return x


def cg_solve(apply: HvpOracle, b, tol: float = 1e-10, max_iter: int | None = None):
    """Conjugate gradients for ``H x = b`` given only ``v -> H v``.

    Returns ``(x, iterations)``. Stops once ``||H x - b|| <= tol * ||b||``.
    Raises NegativeCurvature (carrying the offending direction) if some
    search direction has non-positive curvature, and NonConvergenceError if
    ``max_iter`` is exhausted.
    """
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    n = b.shape[0]
    if max_iter is None:
        max_iter = 10 * max(n, 1)
    x = np.zeros(n)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return x, 0
    r = b.copy()
    d = r.copy()
    rr = float(r @ r)
    for it in range(1, max_iter + 1):
        hd = np.asarray(apply(d), dtype=np.float64).reshape(-1)
        curv = float(d @ hd)
        if curv <= 0.0:
            raise NegativeCurvature(d.copy(), curv)
        step = rr / curv
        x += step * d
        r -= step * hd
        rr_new = float(r @ r)
        if np.sqrt(rr_new) <= tol * bnorm:
            return x, it
        d = r + (rr_new / rr) * d
        rr = rr_new
    raise NonConvergenceError(
        f"CG did not reach tol {tol:g} in {max_iter} iterations", residual=float(np.sqrt(rr))
    )
