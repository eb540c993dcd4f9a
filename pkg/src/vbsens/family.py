"""Mean-field variational families over a flat parameter vector.

A :class:`Layout` maps named factors onto index ranges of the flat vector
``eta``. Normal factors of length ``K`` store ``K`` means followed by ``K``
log standard deviations. Gamma factors are scalar and store
``(log shape, log rate)``. Every function taking ``(layout, eta)`` is
traceable by JAX with the layout held static.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import digamma, gammaln

from vbsens.errors import LayoutError, UnsupportedQueryError

NORMAL = "normal"
GAMMA = "gamma"
HALF_LOG_2PI_E = 0.5 * np.log(2.0 * np.pi * np.e)


@dataclass(frozen=True)
class FactorSpec:
    name: str
    kind: str
    length: int = 1

    def __post_init__(self):
        if self.kind not in (NORMAL, GAMMA):
            raise LayoutError(f"unknown factor kind {self.kind!r}")
        if self.length < 1:
            raise LayoutError(f"factor {self.name!r} must have length >= 1")
        if self.kind == GAMMA and self.length != 1:
            raise LayoutError(f"gamma factor {self.name!r} must be scalar")

    @property
    def n_params(self) -> int:
        return 2 * self.length


@dataclass(frozen=True)
class Layout:
    """Ordered factors and their offsets in the flat parameter vector."""

    factors: tuple[FactorSpec, ...]
    offsets: tuple[int, ...] = field(init=False)
    theta_offsets: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        names = [f.name for f in self.factors]
        if len(set(names)) != len(names):
            raise LayoutError(f"duplicate factor names in {names}")
        offs, toffs, o, t = [], [], 0, 0
        for f in self.factors:
            offs.append(o)
            toffs.append(t)
            o += f.n_params
            t += f.length
        object.__setattr__(self, "offsets", tuple(offs))
        object.__setattr__(self, "theta_offsets", tuple(toffs))

    @classmethod
    def of(cls, *factors: FactorSpec | tuple) -> "Layout":
        specs = tuple(f if isinstance(f, FactorSpec) else FactorSpec(*f) for f in factors)
        return cls(specs)

    @classmethod
    def normal(cls, k: int, name: str = "theta") -> "Layout":
        """Single vector-valued normal factor: eta = (mu_1..mu_k, zeta_1..zeta_k)."""
        return cls((FactorSpec(name, NORMAL, k),))

    @property
    def size(self) -> int:
        return sum(f.n_params for f in self.factors)

    @property
    def theta_size(self) -> int:
        return sum(f.length for f in self.factors)

    @property
    def n_normal(self) -> int:
        return sum(f.length for f in self.factors if f.kind == NORMAL)

    def index(self, name: str) -> int:
        for i, f in enumerate(self.factors):
            if f.name == name:
                return i
        raise LayoutError(f"no factor named {name!r}")

    def factor(self, name: str) -> FactorSpec:
        return self.factors[self.index(name)]

    def param_range(self, name: str) -> range:
        i = self.index(name)
        return range(self.offsets[i], self.offsets[i] + self.factors[i].n_params)

    def first_slice(self, name: str) -> slice:
        """Means of a normal factor, or the log shape of a gamma factor."""
        i = self.index(name)
        o, n = self.offsets[i], self.factors[i].length
        return slice(o, o + n)

    def second_slice(self, name: str) -> slice:
        """Log sds of a normal factor, or the log rate of a gamma factor."""
        i = self.index(name)
        o, n = self.offsets[i], self.factors[i].length
        return slice(o + n, o + 2 * n)

    def theta_slice(self, name: str) -> slice:
        i = self.index(name)
        return slice(self.theta_offsets[i], self.theta_offsets[i] + self.factors[i].length)

    def locate(self, theta_index: int) -> tuple[FactorSpec, int, int]:
        """Return (factor, factor position, coordinate within factor)."""
        for i, f in enumerate(self.factors):
            t0 = self.theta_offsets[i]
            if t0 <= theta_index < t0 + f.length:
                return f, i, theta_index - t0
        raise LayoutError(f"theta index {theta_index} out of range [0, {self.theta_size})")

    def mean_indices(self) -> np.ndarray:
        """Positions in eta of every normal mean, in theta order."""
        idx = []
        for i, f in enumerate(self.factors):
            if f.kind == NORMAL:
                idx.extend(range(self.offsets[i], self.offsets[i] + f.length))
        return np.asarray(idx, dtype=int)

    def to_records(self) -> list[dict]:
        return [
            {"name": f.name, "kind": f.kind, "offset": o, "length": f.length}
            for f, o in zip(self.factors, self.offsets)
        ]

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "Layout":
        recs = sorted(records, key=lambda r: r["offset"])
        layout = cls(tuple(FactorSpec(r["name"], r["kind"], int(r["length"])) for r in recs))
        if [r["offset"] for r in recs] != list(layout.offsets):
            raise LayoutError("record offsets do not partition the parameter vector")
        return layout

    def initial(self) -> np.ndarray:
        """Default start: zero means, unit sds, gamma(1, 1)."""
        return np.zeros(self.size)

    def check(self, eta) -> None:
        if np.shape(eta) != (self.size,):
            raise LayoutError(f"expected parameter vector of length {self.size}, got shape {np.shape(eta)}")


@dataclass(frozen=True)
class VariationalParams:
    layout: Layout
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        self.layout.check(values)
        if not np.all(np.isfinite(values)):
            raise LayoutError("variational parameters must be finite")
        object.__setattr__(self, "values", values)

    def entropy(self) -> float:
        return float(entropy(self.layout, self.values))


# ---------------------------------------------------------------------------
# Per-factor moments


def normal_params(layout: Layout, eta, name: str):
    """(mean, log sd) arrays of a normal factor."""
    return eta[layout.first_slice(name)], eta[layout.second_slice(name)]


def normal_moments(layout: Layout, eta, name: str):
    """(mean, variance) arrays of a normal factor."""
    m, z = normal_params(layout, eta, name)
    return m, jnp.exp(2.0 * z)


def gamma_params(layout: Layout, eta, name: str):
    """(shape, rate) of a scalar gamma factor."""
    return jnp.exp(eta[layout.first_slice(name)][0]), jnp.exp(eta[layout.second_slice(name)][0])


def gamma_moments(layout: Layout, eta, name: str):
    """(E[tau], E[log tau]) of a scalar gamma factor."""
    a, b = gamma_params(layout, eta, name)
    return a / b, digamma(a) - jnp.log(b)


def gamma_entropy(shape, rate):
    return shape - jnp.log(rate) + gammaln(shape) + (1.0 - shape) * digamma(shape)


def entropy(layout: Layout, eta):
    """Sum of per-factor differential entropies (nats)."""
    total = 0.0
    for f in layout.factors:
        if f.kind == NORMAL:
            total = total + jnp.sum(eta[layout.second_slice(f.name)]) + f.length * HALF_LOG_2PI_E
        else:
            total = total + gamma_entropy(*gamma_params(layout, eta, f.name))
    return total


def sample_reparam(layout: Layout, eta, z):
    """Map standard-normal draws to normal-factor coordinates.

    ``z`` has a trailing axis of length ``layout.n_normal``; gamma factors are
    not sampled. Returns ``exp(zeta) * z + mu`` in theta order.
    """
    z = jnp.asarray(z)
    if z.shape[-1] != layout.n_normal:
        raise LayoutError(f"draws have {z.shape[-1]} columns; layout has {layout.n_normal} normal coordinates")
    mu = eta[layout.mean_indices()]
    zeta = eta[_logsd_indices(layout)]
    return jnp.exp(zeta) * z + mu


def _logsd_indices(layout: Layout) -> np.ndarray:
    idx = []
    for i, f in enumerate(layout.factors):
        if f.kind == NORMAL:
            o = layout.offsets[i] + f.length
            idx.extend(range(o, o + f.length))
    return np.asarray(idx, dtype=int)


# ---------------------------------------------------------------------------
# Query functions g(theta)


@dataclass(frozen=True)
class Query:
    """A closed-form posterior functional.

    kind:
      ``identity``  -- theta[i] for i in ``coords``
      ``square``    -- theta[i]**2 for i in ``coords``
      ``product``   -- theta[i] * theta[j] for (i, j) in ``pairs``
      ``exp``       -- exp(theta[i]) for i in ``coords`` (constraining transform)
    """

    kind: str
    coords: tuple[int, ...] = ()
    pairs: tuple[tuple[int, int], ...] = ()
    labels: tuple[str, ...] | None = None

    @classmethod
    def identity(cls, coords: Sequence[int], labels=None) -> "Query":
        return cls("identity", tuple(int(c) for c in coords), labels=_labels(labels))

    @classmethod
    def square(cls, coords: Sequence[int], labels=None) -> "Query":
        return cls("square", tuple(int(c) for c in coords), labels=_labels(labels))

    @classmethod
    def product(cls, pairs: Sequence[tuple[int, int]], labels=None) -> "Query":
        return cls("product", pairs=tuple((int(i), int(j)) for i, j in pairs), labels=_labels(labels))

    @classmethod
    def exp(cls, coords: Sequence[int], labels=None) -> "Query":
        return cls("exp", tuple(int(c) for c in coords), labels=_labels(labels))

    @property
    def dim(self) -> int:
        return len(self.pairs) if self.kind == "product" else len(self.coords)


def _labels(labels):
    return None if labels is None else tuple(str(s) for s in labels)


def _coord_moments(layout: Layout, eta, i: int):
    """(E[theta_i], E[theta_i^2], factor position) for one theta coordinate."""
    f, pos, j = layout.locate(i)
    if f.kind == NORMAL:
        m, v = normal_moments(layout, eta, f.name)
        return m[j], m[j] ** 2 + v[j], pos
    a, b = gamma_params(layout, eta, f.name)
    return a / b, a * (a + 1.0) / b**2, pos


def expect_g(layout: Layout, eta, query: Query):
    """Closed-form E_q[g(theta)] as a 1-d array."""
    eta = jnp.asarray(eta)
    if query.kind == "identity":
        return jnp.stack([_coord_moments(layout, eta, i)[0] for i in query.coords])
    if query.kind == "square":
        return jnp.stack([_coord_moments(layout, eta, i)[1] for i in query.coords])
    if query.kind == "product":
        out = []
        for i, j in query.pairs:
            if i == j:
                out.append(_coord_moments(layout, eta, i)[1])
            else:
                # distinct coordinates are independent under the mean-field family
                out.append(_coord_moments(layout, eta, i)[0] * _coord_moments(layout, eta, j)[0])
        return jnp.stack(out)
    if query.kind == "exp":
        out = []
        for i in query.coords:
            f, _, j = layout.locate(i)
            if f.kind != NORMAL:
                raise UnsupportedQueryError("exp query is defined for normal coordinates only")
            m, v = normal_moments(layout, eta, f.name)
            out.append(jnp.exp(m[j] + 0.5 * v[j]))
        return jnp.stack(out)
    raise UnsupportedQueryError(f"unsupported query kind {query.kind!r}")


def g_eta_jacobian(layout: Layout, eta, query: Query) -> np.ndarray:
    """Jacobian of :func:`expect_g` with respect to the flat parameters."""
    eta = jnp.asarray(eta, dtype=jnp.float64)
    return np.asarray(jax.jacfwd(lambda e: expect_g(layout, e, query))(eta))


def q_covariance(layout: Layout, eta, query: Query) -> np.ndarray:
    """Covariance of an identity query under q itself (diagonal by factorization)."""
    if query.kind != "identity":
        raise UnsupportedQueryError("q covariance is available for identity queries only")
    var = []
    for i in query.coords:
        f, _, j = layout.locate(i)
        if f.kind == NORMAL:
            var.append(float(normal_moments(layout, eta, f.name)[1][j]))
        else:
            a, b = gamma_params(layout, eta, f.name)
            var.append(float(a / b**2))
    return np.diag(var)


def constrain(x, transform: str = "identity"):
    """Apply a constraining transform; returns (value, log |Jacobian|)."""
    if transform == "identity":
        return x, 0.0 * jnp.sum(x)
    if transform == "exp":
        return jnp.exp(x), jnp.sum(x)
    raise UnsupportedQueryError(f"unknown transform {transform!r}")
