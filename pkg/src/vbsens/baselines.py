"""Reference posteriors: Laplace approximation and random-walk Metropolis,
plus the MCMC estimators of local sensitivity."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from vbsens.difflinalg import Derivatives, cholesky_solve
from vbsens.errors import LayoutError, MixingError, NotPositiveDefiniteError
from vbsens.optimize import FitResult, OptimizerConfig, minimize

TARGET_ACCEPT = 0.23


@dataclass
class LaplaceResult:
    theta_hat: np.ndarray
    hessian: np.ndarray
    cov: np.ndarray | None
    degenerate: bool
    fit: FitResult

    @property
    def sd(self) -> np.ndarray | None:
        return None if self.cov is None else np.sqrt(np.diag(self.cov))


def laplace_fit(log_density: Callable, x0, cfg: OptimizerConfig | None = None) -> LaplaceResult:
    """MAP estimate and inverse negative-log-density Hessian.

    The covariance is the linear-response formula for a point-mass family
    (g_eta = identity), i.e. H^{-1} from one Cholesky solve. A Hessian that is
    not positive definite sets ``degenerate`` and leaves ``cov`` as None.
    """
    derivs = Derivatives(lambda x: -log_density(x))
    field_ = derivs.bind()
    fit = minimize(field_, x0, cfg)
    h = field_.hessian(fit.x)
    try:
        cov = cholesky_solve(h, np.eye(h.shape[0]))
        cov = 0.5 * (cov + cov.T)
        degenerate = False
    except NotPositiveDefiniteError:
        cov, degenerate = None, True
    return LaplaceResult(fit.x, h, cov, degenerate, fit)


# ---------------------------------------------------------------------------
# random-walk Metropolis


@dataclass
class ChainOutput:
    draws: np.ndarray
    acceptance_rate: float
    seed: int
    warmup: int
    scale: float
    thin: int = 1
    drho: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def ess(self) -> np.ndarray:
        return ess(self.draws)

    def header(self) -> dict:
        return {
            "seed": self.seed,
            "warmup": self.warmup,
            "acceptance_rate": self.acceptance_rate,
            "scale": self.scale,
            "thin": self.thin,
            **self.metadata,
        }

    def save(self, path) -> None:
        arrays = {"draws": self.draws}
        if self.drho is not None:
            arrays["drho"] = self.drho
        np.savez(Path(path), header=np.array(json.dumps(self.header(), sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path) -> "ChainOutput":
        with np.load(Path(path)) as npz:
            head = json.loads(str(npz["header"]))
            draws = npz["draws"]
            drho = npz["drho"] if "drho" in npz.files else None
        known = {k: head.pop(k) for k in ("seed", "warmup", "acceptance_rate", "scale", "thin")}
        return cls(draws, drho=drho, metadata=head, **known)


def _rwm_kernel(log_density, chol):
    def step(state, key, log_scale):
        x, lp = state
        k1, k2 = jax.random.split(key)
        prop = x + jnp.exp(log_scale) * (chol @ jax.random.normal(k1, x.shape))
        lp_prop = log_density(prop)
        log_ratio = jnp.where(jnp.isfinite(lp_prop), lp_prop - lp, -jnp.inf)
        accept = jnp.log(jax.random.uniform(k2)) < log_ratio
        new = (jnp.where(accept, prop, x), jnp.where(accept, lp_prop, lp))
        return new, accept, jnp.minimum(1.0, jnp.exp(log_ratio))

    return step


def rwm_sample(
    log_density: Callable,
    x0,
    n_draws: int,
    warmup: int,
    proposal_cov=None,
    seed: int = 0,
    thin: int = 1,
) -> ChainOutput:
    """Random-walk Metropolis with N(0, s^2 (2.38^2 / K) proposal_cov) steps.

    During warmup log s follows a Robbins-Monro recursion towards 23%
    acceptance; it is frozen afterwards so the sampling phase is a fixed
    Markov kernel. ``n_draws`` draws are kept, one every ``thin`` steps.
    """
    x0 = jnp.asarray(x0, dtype=jnp.float64)
    k = x0.size
    cov = np.eye(k) if proposal_cov is None else np.asarray(proposal_cov, dtype=np.float64)
    try:
        chol = np.linalg.cholesky((2.38**2 / k) * cov)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("proposal covariance is not positive definite") from exc
    step = _rwm_kernel(log_density, jnp.asarray(chol))
    lp0 = log_density(x0)
    if not np.isfinite(float(lp0)):
        raise ValueError("log density is not finite at the starting point")
    key_warm, key_draw = jax.random.split(jax.random.PRNGKey(seed))

    @jax.jit
    def run_warmup(state, key):
        def body(carry, inp):
            st, log_s = carry
            t, kk = inp
            st, _, prob = step(st, kk, log_s)
            log_s = log_s + (t + 1.0) ** -0.6 * (prob - TARGET_ACCEPT)
            return (st, log_s), None

        keys = jax.random.split(key, max(warmup, 1))
        ts = jnp.arange(max(warmup, 1), dtype=jnp.float64)
        (st, log_s), _ = jax.lax.scan(body, (state, 0.0), (ts[:warmup], keys[:warmup]))
        return st, log_s

    @jax.jit
    def run_sampling(state, log_s, key):
        def outer(st, kk):
            def inner(st2, k3):
                st2, acc, _ = step(st2, k3, log_s)
                return st2, acc

            st, accs = jax.lax.scan(inner, st, jax.random.split(kk, thin))
            return st, (st[0], jnp.sum(accs))

        _, (xs, accs) = jax.lax.scan(outer, state, jax.random.split(key, n_draws))
        return xs, jnp.sum(accs)

    state, log_s = run_warmup((x0, lp0), key_warm)
    xs, n_acc = run_sampling(state, log_s, key_draw)
    rate = float(n_acc) / (n_draws * thin)
    if rate == 0.0:
        raise MixingError("no proposals accepted after warmup")
    return ChainOutput(np.asarray(xs), rate, int(seed), int(warmup), float(np.exp(log_s)), int(thin))


# ---------------------------------------------------------------------------
# effective sample size


def _autocorr(x: np.ndarray) -> np.ndarray:
    n = x.size
    xc = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n] / n
    return acov / acov[0]


def ess(draws, return_flags: bool = False):
    """Per-coordinate ESS via Geyer's initial positive sequence, capped at N.

    A constant coordinate gets ESS 0 and, with ``return_flags``, a True
    degenerate flag.
    """
    draws = np.asarray(draws, dtype=np.float64)
    if draws.ndim == 1:
        draws = draws[:, None]
    n, k = draws.shape
    out = np.zeros(k)
    flags = np.zeros(k, dtype=bool)
    for j in range(k):
        x = draws[:, j]
        if np.ptp(x) == 0:
            flags[j] = True
            continue
        rho = _autocorr(x)
        pair_sum = 0.0
        for t in range(0, n - 1, 2):
            gamma = rho[t] + rho[t + 1]
            if gamma <= 0:
                break
            pair_sum += gamma
        tau = -1.0 + 2.0 * pair_sum
        out[j] = n if tau <= 1.0 else n / tau
    return (out, flags) if return_flags else out


# ---------------------------------------------------------------------------
# sensitivity estimators from draws


def mcmc_sensitivity(g_values, drho_values) -> np.ndarray:
    """Sample covariance of g and d rho / d alpha (1/N normalization)."""
    g = np.asarray(g_values, dtype=np.float64)
    d = np.asarray(drho_values, dtype=np.float64)
    g = g[:, None] if g.ndim == 1 else g
    d = d[:, None] if d.ndim == 1 else d
    if g.shape[0] != d.shape[0]:
        raise LayoutError(f"{g.shape[0]} g values but {d.shape[0]} d rho values")
    n = g.shape[0]
    return g.T @ d / n - np.outer(g.mean(axis=0), d.mean(axis=0))


def is_derivative(g_values, rho_fn: Callable, draws, alpha0) -> np.ndarray:
    """Derivative at alpha0 of the self-normalized importance-sampling mean of g.

    ``rho_fn(draws, alpha)`` returns rho(theta_n, alpha) for every draw. The
    weights w_n = exp(rho(theta_n, alpha) - rho(theta_n, alpha0)) are
    differentiated directly.
    """
    g = jnp.asarray(g_values, dtype=jnp.float64)
    g = g[:, None] if g.ndim == 1 else g
    draws = jnp.asarray(draws, dtype=jnp.float64)
    alpha0 = jnp.atleast_1d(jnp.asarray(alpha0, dtype=jnp.float64))
    if g.shape[0] != draws.shape[0]:
        raise LayoutError("g values and draws differ in length")
    base = rho_fn(draws, alpha0)

    def weighted_mean(alpha):
        logw = rho_fn(draws, alpha) - base
        w = jax.nn.softmax(logw)
        return w @ g

    return np.asarray(jax.jacfwd(weighted_mean)(alpha0))
