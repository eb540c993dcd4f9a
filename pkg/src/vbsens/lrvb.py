"""Linear-response covariances and local sensitivities at a KL optimum.

At a stationary point eta* of KL(eta, alpha0) the derivative of the
variational expectation E_q[g] with respect to alpha is

    S = g_eta H^{-1} f_alpha_eta^T

and the linear-response covariance is the same expression with f replaced by
g_eta. Everything here works from an objective in :mod:`vbsens.objectives`
and a converged :class:`~vbsens.optimize.FitResult`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from vbsens.difflinalg import HvpOracle, cg_solve, cholesky_solve
from vbsens.errors import (
    ConsistencyError,
    DegenerateError,
    NonConvergenceError,
    NotPositiveDefiniteError,
)
from vbsens.family import Query, g_eta_jacobian
from vbsens.optimize import FitResult, OptimizerConfig

log = logging.getLogger(__name__)

PSD_RTOL = 1e-8


@dataclass(frozen=True)
class BlockLayout:
    """Global index range plus one contiguous range per local group."""

    global_range: range
    local_ranges: tuple[range, ...]

    def __post_init__(self):
        object.__setattr__(self, "local_ranges", tuple(self.local_ranges))
        covered = sorted(list(self.global_range) + [i for r in self.local_ranges for i in r])
        if covered != list(range(len(covered))):
            raise ConsistencyError("block ranges must partition the parameter indices")

    @property
    def size(self) -> int:
        return len(self.global_range) + sum(len(r) for r in self.local_ranges)

    @classmethod
    def from_objective(cls, objective) -> "BlockLayout | None":
        if getattr(objective, "block_structure", None) is None:
            return None
        g, locs = objective.block_structure
        return cls(g, tuple(locs))


@dataclass
class LrvbSystem:
    eta: np.ndarray
    g_eta: np.ndarray
    f_alpha_eta: np.ndarray
    grad_norm: float
    hessian: np.ndarray | None = None
    oracle: HvpOracle | None = None
    blocks: BlockLayout | None = None
    g_labels: list[str] | None = None
    alpha_labels: list[str] | None = None
    _solves: dict = field(default_factory=dict, repr=False)

    @property
    def size(self) -> int:
        return self.eta.size

    @property
    def matrix_free(self) -> bool:
        return self.hessian is None

    def solve(self, rhs: np.ndarray, key: str | None = None) -> np.ndarray:
        """H^{-1} rhs, cached by ``key`` so identical right-hand sides share a solve."""
        if key is not None and key in self._solves:
            return self._solves[key]
        rhs = np.asarray(rhs, dtype=np.float64)
        if self.hessian is not None:
            if self.blocks is not None:
                out = block_solve(self.hessian, rhs, self.blocks)
            else:
                out = cholesky_solve(self.hessian, rhs)
        else:
            cols = rhs.reshape(self.size, -1)
            out = np.column_stack([cg_solve(self.oracle, c, tol=1e-10)[0] for c in cols.T]).reshape(rhs.shape)
        if key is not None:
            self._solves[key] = out
        return out


def build_system(
    objective,
    fit: FitResult,
    query: Query,
    alpha=None,
    cfg: OptimizerConfig | None = None,
    mode: str = "auto",
) -> LrvbSystem:
    """Assemble H, g_eta and f_alpha_eta at a verified optimum.

    ``mode`` is ``dense``, ``block`` (arrow-structured dense solve),
    ``matrix_free`` (CG on Hessian-vector products) or ``auto``.
    Raises NonConvergenceError if the gradient at ``fit.x`` is not below the
    optimizer tolerance and DegenerateError if the Hessian is not PD.
    """
    cfg = cfg or OptimizerConfig()
    eta = np.asarray(fit.x, dtype=np.float64)
    field_ = objective.at(alpha)
    f, g = field_.value_and_grad(eta)
    gnorm = float(np.linalg.norm(g))
    if not fit.converged or gnorm > cfg.gtol * (1.0 + abs(f)):
        raise NonConvergenceError(
            f"refusing to linearize at a non-stationary point: |grad| = {gnorm:.3e}", residual=gnorm
        )
    blocks = BlockLayout.from_objective(objective)
    if mode == "auto":
        mode = "matrix_free" if eta.size > cfg.dense_limit else ("block" if blocks is not None else "dense")
    hess = oracle = None
    if mode in ("dense", "block"):
        hess = field_.hessian(eta)
        if mode == "block":
            if blocks is None:
                raise ValueError("objective has no block structure")
            if not check_arrow_structure(hess, blocks):
                log.warning("Hessian violates the declared block structure; using a dense solve")
                blocks = None
        else:
            blocks = None
        try:
            cholesky_solve(hess, np.zeros(eta.size))
        except NotPositiveDefiniteError as exc:
            raise DegenerateError(f"KL Hessian is not positive definite (pivot {exc.pivot})") from exc
    elif mode == "matrix_free":
        oracle = field_.oracle(eta)
        blocks = None
    else:
        raise ValueError(f"unknown mode {mode!r}")
    g_eta = g_eta_jacobian(objective.layout, eta, query)
    f_ae = objective.f_alpha_eta(eta, alpha)
    return LrvbSystem(
        eta=eta,
        g_eta=g_eta,
        f_alpha_eta=f_ae,
        grad_norm=gnorm,
        hessian=hess,
        oracle=oracle,
        blocks=blocks,
        g_labels=list(query.labels) if query.labels else None,
    )


def _symmetric_psd(c: np.ndarray) -> np.ndarray:
    c = 0.5 * (c + c.T)
    if c.size == 0:
        return c
    w = np.linalg.eigvalsh(c)
    if w[0] < -PSD_RTOL * max(abs(w[-1]), 1e-300):
        raise ConsistencyError(f"linear-response covariance has eigenvalue {w[0]:.3e}")
    return c


def lrvb_covariance(sys: LrvbSystem) -> np.ndarray:
    """g_eta H^{-1} g_eta^T, symmetrized and checked PSD."""
    x = sys.solve(sys.g_eta.T, key="g_eta")
    return _symmetric_psd(sys.g_eta @ x)


def sensitivity(sys: LrvbSystem) -> np.ndarray:
    """g_eta H^{-1} f_alpha_eta^T, rows indexed by g, columns by alpha.

    When f_alpha_eta equals g_eta the covariance solve is reused, so the
    result is bitwise identical to :func:`lrvb_covariance`.
    """
    if sys.f_alpha_eta.shape == sys.g_eta.shape and np.array_equal(sys.f_alpha_eta, sys.g_eta):
        return lrvb_covariance(sys)
    if not np.any(sys.f_alpha_eta):
        return np.zeros((sys.g_eta.shape[0], sys.f_alpha_eta.shape[0]))
    return sys.g_eta @ sys.solve(sys.f_alpha_eta.T, key="f_alpha_eta")


def normalized_sensitivity(s: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Divide each row of S by the linear-response sd of its g component."""
    var = np.diag(np.asarray(cov, dtype=np.float64))
    if np.any(var <= 0):
        raise DegenerateError("cannot normalize by a non-positive variance")
    return np.asarray(s) / np.sqrt(var)[:, None]


# ---------------------------------------------------------------------------
# arrow-structured solves


def check_arrow_structure(h: np.ndarray, blocks: BlockLayout, atol: float = 0.0) -> bool:
    """True if every local-local cross block of ``h`` is (numerically) zero."""
    mask = np.ones(h.shape, dtype=bool)
    g = np.asarray(blocks.global_range, dtype=int)
    mask[g, :] = False
    mask[:, g] = False
    for r in blocks.local_ranges:
        idx = np.asarray(r, dtype=int)
        mask[np.ix_(idx, idx)] = False
    scale = atol if atol > 0 else 1e-12 * (1.0 + np.max(np.abs(h)))
    return bool(np.all(np.abs(h[mask]) <= scale))


def probe_arrow_structure(oracle: HvpOracle, blocks: BlockLayout, n_probes: int = 3, seed: int = 0) -> bool:
    """Spot-check block structure with Hessian-vector products on local basis vectors."""
    rng = np.random.default_rng(seed)
    n = blocks.size
    locs = blocks.local_ranges
    if len(locs) < 2:
        return True
    for t in rng.choice(len(locs), size=min(n_probes, len(locs)), replace=False):
        e = np.zeros(n)
        e[locs[t][0]] = 1.0
        hv = oracle(e)
        others = np.concatenate([np.asarray(r) for s, r in enumerate(locs) if s != t])
        if np.any(np.abs(hv[others]) > 1e-12 * (1.0 + np.max(np.abs(hv)))):
            return False
    return True


def block_solve(h: np.ndarray, rhs: np.ndarray, blocks: BlockLayout) -> np.ndarray:
    """Solve H X = B for arrow-structured H via the Schur complement on the global block.

    Falls back to a dense Cholesky solve when the structure does not hold.
    """
    if not check_arrow_structure(h, blocks):
        log.warning("Hessian violates the declared block structure; using a dense solve")
        return cholesky_solve(h, rhs)
    rhs = np.asarray(rhs, dtype=np.float64)
    vec = rhs.ndim == 1
    b = rhs.reshape(h.shape[0], -1)
    gi = np.asarray(blocks.global_range, dtype=int)
    a = h[np.ix_(gi, gi)]
    schur = a.copy()
    rg = b[gi].copy()
    solved = []
    for r in blocks.local_ranges:
        li = np.asarray(r, dtype=int)
        d = h[np.ix_(li, li)]
        c = h[np.ix_(li, gi)]
        # D^{-1} [C | b_loc] in one factorization
        sol = cholesky_solve(d, np.column_stack([c, b[li]]))
        dinv_c, dinv_b = sol[:, : gi.size], sol[:, gi.size :]
        schur -= c.T @ dinv_c
        rg -= c.T @ dinv_b
        solved.append((li, dinv_c, dinv_b))
    x = np.empty_like(b)
    xg = cholesky_solve(schur, rg)
    x[gi] = xg
    for li, dinv_c, dinv_b in solved:
        x[li] = dinv_b - dinv_c @ xg
    return x.ravel() if vec else x


# ---------------------------------------------------------------------------
# Monte-Carlo adequacy and pushforward covariances


@dataclass
class AdequacyReport:
    sampling_sd: np.ndarray
    posterior_sd: np.ndarray
    flagged: np.ndarray
    threshold: float = 0.5

    @property
    def adequate(self) -> bool:
        return not bool(np.any(self.flagged))

    @property
    def recommendation(self) -> str:
        return "keep" if self.adequate else "increase the number of draws"


def frequentist_cov(objective, sys: LrvbSystem, alpha=None) -> np.ndarray:
    """Approximate sampling covariance of eta* over redraws of the frozen draws.

    H^{-1} C H^{-1}, with C = (1/M) * sample covariance of the per-draw
    gradient contributions at eta*.
    """
    if not getattr(objective, "is_stochastic", False):
        return np.zeros((sys.size, sys.size))
    m = objective.n_draws
    if m < 2:
        raise ValueError("need at least two draws to estimate sampling variability")
    grads = objective.per_draw_gradients(sys.eta, alpha)
    c = np.cov(grads, rowvar=False, ddof=1) / m
    hinv_c = sys.solve(c)
    out = sys.solve(hinv_c.T)
    return 0.5 * (out + out.T)


def adequacy_check(objective, sys: LrvbSystem, cov_lr: np.ndarray, threshold: float = 0.5, alpha=None) -> AdequacyReport:
    """Flag fitted means whose Monte-Carlo sd exceeds ``threshold`` posterior sds.

    ``cov_lr`` is the linear-response covariance of the means, in the order of
    ``objective.layout.mean_indices()``.
    """
    idx = objective.layout.mean_indices()
    post_sd = np.sqrt(np.diag(cov_lr))
    if not getattr(objective, "is_stochastic", False):
        zero = np.zeros(idx.size)
        return AdequacyReport(zero, post_sd, np.zeros(idx.size, dtype=bool), threshold)
    if objective.n_draws < 2:
        raise ValueError("need at least two draws to estimate sampling variability")
    cov_eta = frequentist_cov(objective, sys, alpha)
    samp_sd = np.sqrt(np.clip(np.diag(cov_eta)[idx], 0.0, None))
    return AdequacyReport(samp_sd, post_sd, samp_sd > threshold * post_sd, threshold)


def pushforward_cov(mean, cov, g, n_draws: int = 100_000, seed: int = 0) -> np.ndarray:
    """Sample covariance of g(theta) for theta ~ N(mean, cov).

    ``g`` maps an (n, K) array of draws to an (n,) or (n, D) array.
    """
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    cov = np.asarray(cov, dtype=np.float64)
    factor = psd_factor(cov)
    z = np.random.default_rng(seed).standard_normal((n_draws, mean.size))
    vals = np.asarray(g(mean + z @ factor.T), dtype=np.float64)
    return np.atleast_2d(np.cov(vals.reshape(n_draws, -1), rowvar=False, ddof=1))


def psd_factor(cov: np.ndarray) -> np.ndarray:
    """L with L L^T = cov; tiny negative eigenvalues are clipped to zero."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(0.5 * (cov + cov.T))
        if w[0] < -PSD_RTOL * max(abs(w[-1]), 1e-300):
            raise NotPositiveDefiniteError(f"covariance has eigenvalue {w[0]:.3e}") from None
        return v * np.sqrt(np.clip(w, 0.0, None))


@dataclass
class SensitivityReport:
    sensitivity: np.ndarray
    cov_lr: np.ndarray
    normalized: np.ndarray
    g_labels: list[str]
    alpha_labels: list[str]
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "g_labels": list(self.g_labels),
            "alpha_labels": list(self.alpha_labels),
            "sensitivity": self.sensitivity.tolist(),
            "cov_lr": self.cov_lr.tolist(),
            "normalized": self.normalized.tolist(),
            "metadata": dict(self.metadata),
        }


def sensitivity_report(sys: LrvbSystem, g_labels=None, alpha_labels=None, metadata=None) -> SensitivityReport:
    cov = lrvb_covariance(sys)
    s = sensitivity(sys)
    g_labels = list(g_labels or sys.g_labels or [f"g_{i}" for i in range(cov.shape[0])])
    alpha_labels = list(alpha_labels or sys.alpha_labels or [f"alpha_{j}" for j in range(s.shape[1])])
    return SensitivityReport(s, cov, normalized_sensitivity(s, cov), g_labels, alpha_labels, dict(metadata or {}))
