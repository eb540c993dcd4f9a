"""Gauss-Hermite rules for expectations under a standard normal."""

from __future__ import annotations

from dataclasses import dataclass, field

import jax.numpy as jnp
from jax.core import Tracer
import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from vbsens.errors import DomainError


@dataclass(frozen=True)
class GaussHermiteRule:
    """``E[f(Z)] ~= sum_s weights[s] * f(nodes[s])`` for Z ~ N(0, 1).

    Probabilists' nodes with weights rescaled to sum to one, so a rule of
    size n is exact for polynomials of degree up to 2n - 1.
    """

    n: int = 4
    nodes: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("rule size must be positive")
        x, w = hermegauss(self.n)
        # enforce the exact symmetry of the rule so odd moments cancel
        x = 0.5 * (x - x[::-1])
        w = 0.5 * (w + w[::-1])
        object.__setattr__(self, "nodes", x)
        object.__setattr__(self, "weights", w / np.sqrt(2.0 * np.pi))

    def expect(self, f, mean=0.0, var=1.0):
        """E[f(X)] for X ~ N(mean, var); broadcasts over mean/var."""
        mean = jnp.asarray(mean)[..., None]
        sd = jnp.sqrt(jnp.asarray(var))[..., None]
        return jnp.sum(self.weights * f(sd * self.nodes + mean), axis=-1)


def gh_expect_log1mp(e_rho, var_rho, rule: GaussHermiteRule):
    """E[log(1 - logistic(rho))] = -E[log(1 + e^rho)] for rho ~ N(e_rho, var_rho)."""
    if not isinstance(var_rho, Tracer) and np.any(np.asarray(var_rho) < 0):
        raise DomainError("variance of the linear predictor must be non-negative")
    return rule.expect(lambda r: -jnp.logaddexp(0.0, r), e_rho, var_rho)
