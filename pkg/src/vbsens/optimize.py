"""Trust-region Newton with Steihaug-truncated conjugate gradients.

Only gradients and Hessian-vector products are needed. The loop stops when
``||grad|| <= gtol * (1 + |f|)`` so that downstream sensitivity formulas are
evaluated at a genuine stationary point.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from vbsens.difflinalg import Derivatives, cholesky_solve
from vbsens.errors import DomainError, NotPositiveDefiniteError

log = logging.getLogger(__name__)

# relative size below which a predicted decrease is indistinguishable from
# floating-point noise in f
_ROUNDOFF = 64 * np.finfo(np.float64).eps


@dataclass(frozen=True)
class OptimizerConfig:
    gtol: float = 1e-8
    initial_radius: float = 1.0
    max_radius: float = 100.0
    max_iter: int = 500
    accept_ratio: float = 0.1
    max_cg_iter: int | None = None
    check_hessian: bool = True
    dense_limit: int = 2000

    def __post_init__(self):
        if not (self.gtol > 0 and self.initial_radius > 0 and self.max_radius > 0):
            raise ValueError("tolerances and radii must be positive")
        if self.initial_radius > self.max_radius:
            raise ValueError("initial radius exceeds the maximum radius")
        if not 0 <= self.accept_ratio < 0.25:
            raise ValueError("accept_ratio must lie in [0, 0.25)")


@dataclass
class FitResult:
    x: np.ndarray
    fun: float
    grad_norm: float
    n_iter: int
    converged: bool
    message: str = ""
    degenerate: bool | None = None
    trace: list[dict] = field(default_factory=list)

    def grad_tolerance(self, gtol: float) -> float:
        return gtol * (1.0 + abs(self.fun))


def _to_boundary(z, d, radius):
    """Positive tau with ||z + tau d|| = radius."""
    a = d @ d
    b = 2.0 * (z @ d)
    c = z @ z - radius**2
    return (-b + np.sqrt(max(b * b - 4.0 * a * c, 0.0))) / (2.0 * a)


def steihaug_cg(hvp: Callable, g: np.ndarray, radius: float, tol: float, max_iter: int):
    """Approximately minimize g'p + p'Hp/2 subject to ||p|| <= radius.

    Returns (step, hit_boundary).
    """
    z = np.zeros_like(g)
    r = g.copy()
    d = -r
    if np.linalg.norm(r) < tol:
        return z, False
    for _ in range(max_iter):
        hd = hvp(d)
        dhd = d @ hd
        if dhd <= 0:
            return z + _to_boundary(z, d, radius) * d, True
        rr = r @ r
        step = rr / dhd
        z_new = z + step * d
        if np.linalg.norm(z_new) >= radius:
            return z + _to_boundary(z, d, radius) * d, True
        r = r + step * hd
        z = z_new
        if np.linalg.norm(r) < tol:
            return z, False
        d = -r + (r @ r) / rr * d
    return z, False


def minimize(field_, x0, cfg: OptimizerConfig | None = None, trace_stream=None) -> FitResult:
    """Minimize ``field_`` (an object with ``value_and_grad`` and ``hvp``).

    ``trace_stream``, when given, receives one JSON line per iteration with
    keys iter, f, gnorm, radius.
    """
    cfg = cfg or OptimizerConfig()
    x = np.array(x0, dtype=np.float64)
    n = x.size
    max_cg = cfg.max_cg_iter or 2 * n + 10
    f, g = field_.value_and_grad(x)
    radius = cfg.initial_radius
    trace: list[dict] = []
    converged = False
    message = "maximum iterations reached"
    it = 0
    for it in range(cfg.max_iter + 1):
        gnorm = float(np.linalg.norm(g))
        rec = {"iter": it, "f": f, "gnorm": gnorm, "radius": radius}
        trace.append(rec)
        if trace_stream is not None:
            trace_stream.write(json.dumps(rec) + "\n")
        if gnorm <= cfg.gtol * (1.0 + abs(f)):
            converged, message = True, "gradient tolerance reached"
            break
        if it == cfg.max_iter:
            break
        # inner loop: shrink until a step is accepted
        while True:
            tol = min(0.5, np.sqrt(gnorm)) * gnorm
            p, hit = steihaug_cg(lambda v: field_.hvp(x, v), g, radius, tol, max_cg)
            hp = field_.hvp(x, p)
            pred = -(g @ p + 0.5 * p @ hp)
            try:
                f_new, g_new = field_.value_and_grad(x + p)
            except DomainError:
                f_new, g_new = np.inf, None
            actual = f - f_new
            if pred > _ROUNDOFF * (1.0 + abs(f)):
                ratio = actual / pred
            else:
                # predicted decrease is at the round-off level of f, so the
                # value cannot arbitrate; accept a step that lowers f or |g|
                ok = g_new is not None and (actual >= 0 or np.linalg.norm(g_new) < gnorm)
                ratio = 1.0 if ok else -np.inf
            if ratio < 0.25:
                radius = 0.25 * min(radius, float(np.linalg.norm(p)))
            elif ratio > 0.75 and hit:
                radius = min(2.0 * radius, cfg.max_radius)
            if ratio > cfg.accept_ratio and np.isfinite(f_new):
                x, f, g = x + p, f_new, g_new
                break
            if radius < 1e-14 * (1.0 + np.linalg.norm(x)):
                message = "trust radius collapsed"
                log.warning("trust radius collapsed at iteration %d (|g| = %.3e)", it, gnorm)
                return _finish(field_, x, f, g, it, False, message, trace, cfg)
    return _finish(field_, x, f, g, it, converged, message, trace, cfg)


def _finish(field_, x, f, g, it, converged, message, trace, cfg) -> FitResult:
    res = FitResult(x, float(f), float(np.linalg.norm(g)), it, converged, message, None, trace)
    if converged and cfg.check_hessian and x.size <= cfg.dense_limit:
        res.degenerate = not is_strict_minimum(field_.hessian(x))
    return res


def is_strict_minimum(h: np.ndarray) -> bool:
    try:
        cholesky_solve(h, np.zeros(h.shape[0]))
    except NotPositiveDefiniteError:
        return False
    return True


def map_estimate(log_density: Callable, x0, cfg: OptimizerConfig | None = None, verbose: bool = False) -> FitResult:
    """Mode of an (unnormalized, unconstrained) log density."""
    derivs = Derivatives(lambda x: -log_density(x))
    return minimize(derivs.bind(), x0, cfg, trace_stream=sys.stderr if verbose else None)
