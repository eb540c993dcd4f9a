"""Deterministic KL objectives ``KL(eta, alpha)``.

Every objective exposes the same surface so the optimizer and the
linear-response code never need to know which target sits behind it:

* ``layout`` and ``alpha0`` (base hyperparameters, possibly empty)
* ``kl(eta, alpha)``: a JAX-traceable scalar
* ``derivs``: compiled value/gradient/HVP in ``eta`` with ``alpha`` passed through
* ``cross(eta, alpha)``: the mixed second derivative d^2 KL / d eta d alpha
"""

from __future__ import annotations

from functools import cached_property

import jax
import jax.numpy as jnp
import numpy as np

from vbsens.difflinalg import BoundField, Derivatives
from vbsens.errors import DomainError, LayoutError
from vbsens.family import Layout, entropy, normal_moments, sample_reparam
from vbsens.targets.glmm import GlmmModel, glmm_expected_log_prior, glmm_layout, glmm_rho_moments
from vbsens.targets.mixture import MvnTarget, TiltingPerturbation
from vbsens.targets.quadrature import GaussHermiteRule, gh_expect_log1mp


class KLObjective:
    """Shared plumbing; subclasses define ``layout``, ``alpha0`` and ``kl``."""

    layout: Layout
    alpha0: np.ndarray
    block_structure: tuple[range, list[range]] | None = None

    def kl(self, eta, alpha):  # pragma: no cover - abstract
        raise NotImplementedError

    @cached_property
    def derivs(self) -> Derivatives:
        return Derivatives(self.kl)

    @cached_property
    def _cross(self):
        return jax.jit(jax.jacfwd(jax.grad(self.kl, argnums=0), argnums=1))

    def at(self, alpha=None) -> BoundField:
        return self.derivs.bind(self._alpha(alpha))

    def _alpha(self, alpha):
        return jnp.asarray(self.alpha0 if alpha is None else alpha, dtype=jnp.float64)

    def value(self, eta, alpha=None) -> float:
        return self.derivs.value(eta, self._alpha(alpha))

    def cross(self, eta, alpha=None) -> np.ndarray:
        """d^2 KL / d eta d alpha^T, shape (len(eta), len(alpha))."""
        out = np.asarray(self._cross(jnp.asarray(eta, dtype=jnp.float64), self._alpha(alpha)))
        return out.reshape(self.layout.size, -1)

    def f_alpha_eta(self, eta, alpha=None) -> np.ndarray:
        """d^2 E_q[rho] / d alpha d eta^T; equals -cross^T since KL carries -E_q[rho]."""
        return -self.cross(eta, alpha).T

    @property
    def is_stochastic(self) -> bool:
        return False


class FixedDrawKL(KLObjective):
    """Monte-Carlo KL over a factorizing normal family with frozen draws.

    ``KL(eta, alpha) = -(1/M) sum_m log p(exp(zeta) * z_m + mu | alpha) - H[q]``.
    The draws come from ``numpy.random.default_rng(seed)`` and never change.
    """

    def __init__(self, target, n_draws: int = 10, seed: int = 0, pert: TiltingPerturbation | None = None):
        if n_draws < 2:
            raise ValueError("need at least two frozen draws")
        self.target = target
        self.pert = pert
        self.n_draws = int(n_draws)
        self.seed = int(seed)
        self.layout = Layout.normal(target.dim)
        self.alpha0 = np.zeros(pert.dim if pert is not None else 0)
        draws = np.random.default_rng(self.seed).standard_normal((self.n_draws, target.dim))
        draws.setflags(write=False)
        self.draws = draws

    @property
    def is_stochastic(self) -> bool:
        return True

    def log_p(self, theta, alpha):
        lp = self.target.log_density(theta)
        if self.pert is not None:
            lp = lp + self.pert.rho(theta, alpha)
        return lp

    def per_draw(self, eta, alpha):
        """-log p at each mapped draw (the entropy is added separately)."""
        return self.per_draw_at(eta, self.draws, alpha)

    def kl(self, eta, alpha):
        return jnp.mean(self.per_draw(eta, alpha)) - entropy(self.layout, eta)

    def _single_draw(self, eta, z, alpha):
        return self.per_draw_at(eta, z[None, :], alpha)[0]

    def per_draw_at(self, eta, z, alpha):
        theta = sample_reparam(self.layout, eta, z)
        return -self.log_p(theta, alpha)

    @cached_property
    def _per_draw_jac(self):
        # one gradient per draw; a dense jacrev would build an M x M intermediate
        g = jax.vmap(jax.grad(self._single_draw), in_axes=(None, 0, None))
        return jax.jit(lambda eta, alpha: g(eta, jnp.asarray(self.draws), alpha))

    @cached_property
    def _per_draw_values(self):
        return jax.jit(self.per_draw)

    def per_draw_gradients(self, eta, alpha=None) -> np.ndarray:
        """Gradient of each draw's term, shape (M, len(eta))."""
        return np.asarray(self._per_draw_jac(jnp.asarray(eta, dtype=jnp.float64), self._alpha(alpha)))

    def check_draws(self, eta, alpha=None) -> None:
        vals = np.asarray(self._per_draw_values(jnp.asarray(eta, dtype=jnp.float64), self._alpha(alpha)))
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            raise DomainError(f"log density is not finite at draw {bad[0]}", index=int(bad[0]))


class MvnClosedKL(KLObjective):
    """Closed-form KL from a factorizing normal to N(mean, cov), constant dropped.

    With m, v the variational means and variances and L the target precision::

        1/2 tr(L diag v) + 1/2 m'Lm - mean' L m - 1/2 sum log v - alpha' m[coords]
    """

    def __init__(self, target: MvnTarget, pert: TiltingPerturbation | None = None):
        self.target = target
        self.pert = pert
        self.layout = Layout.normal(target.dim)
        self.alpha0 = np.zeros(pert.dim if pert is not None else 0)
        self._lam = jnp.asarray(target.precision)
        self._lam_mean = jnp.asarray(target.precision @ target.mean)

    def kl(self, eta, alpha):
        m, v = normal_moments(self.layout, eta, self.layout.factors[0].name)
        val = (
            0.5 * jnp.sum(jnp.diag(self._lam) * v)
            + 0.5 * m @ self._lam @ m
            - self._lam_mean @ m
            - jnp.sum(eta[self.layout.second_slice(self.layout.factors[0].name)])
        )
        if self.pert is not None:
            val = val - self.pert.rho(m, alpha)
        return val

    def optimum(self) -> np.ndarray:
        """Analytic minimizer: means equal the target mean, v_k = 1 / L_kk."""
        return np.concatenate([self.target.mean, -0.5 * np.log(np.diag(self.target.precision))])


class GlmmKL(KLObjective):
    """KL for the logistic GLMM with Gauss-Hermite Bernoulli expectations.

    ``alpha`` is the seven-vector of prior hyperparameters.
    """

    def __init__(self, model: GlmmModel, rule: GaussHermiteRule | None = None):
        self.model = model
        self.rule = rule or GaussHermiteRule(4)
        self.layout = glmm_layout(model.k_x, model.n_groups)
        self.alpha0 = model.prior.vector()
        k = 2 * model.k_x + 4
        self.block_structure = (range(0, k), [range(k + 2 * t, k + 2 * t + 2) for t in range(model.n_groups)])

    def expected_log_lik(self, eta):
        if self.model.n_obs == 0:
            return 0.0 * jnp.sum(eta)
        e_rho, v_rho = glmm_rho_moments(self.layout, eta, self.model.x, self.model.group)
        return jnp.sum(self.model.y * e_rho + gh_expect_log1mp(e_rho, v_rho, self.rule))

    def kl(self, eta, alpha):
        return (
            -self.expected_log_lik(eta)
            - glmm_expected_log_prior(self.model, self.layout, eta, alpha)
            - entropy(self.layout, eta)
        )


def kl_hat(obj: FixedDrawKL, eta, alpha=None) -> float:
    """Frozen-draw KL estimate; raises DomainError naming the first bad draw."""
    eta = np.asarray(eta, dtype=np.float64)
    obj.layout.check(eta)
    obj.check_draws(eta, alpha)
    return obj.value(eta, alpha)


def kl_closed_mvn(target: MvnTarget, eta) -> float:
    eta = np.asarray(eta, dtype=np.float64)
    if eta.shape != (2 * target.dim,):
        raise LayoutError(f"expected {2 * target.dim} parameters for a {target.dim}-dim target")
    return MvnClosedKL(target).value(eta)


def glmm_kl(model: GlmmModel, eta, alpha=None, rule: GaussHermiteRule | None = None) -> float:
    return GlmmKL(model, rule).value(eta, alpha)
