"""Mean-field variational Bayes with linear-response covariances and
local prior sensitivity.

All numerics run in double precision; importing the package switches JAX
into 64-bit mode before any array is created.
"""

import jax

jax.config.update("jax_enable_x64", True)

from vbsens.errors import (  # noqa: E402
    ConfigError,
    ConsistencyError,
    DataError,
    DegenerateError,
    DomainError,
    LayoutError,
    MixingError,
    NegativeCurvature,
    NonConvergenceError,
    NotPositiveDefiniteError,
    UnsupportedQueryError,
    VbsensError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ConsistencyError",
    "DataError",
    "DegenerateError",
    "DomainError",
    "LayoutError",
    "MixingError",
    "NegativeCurvature",
    "NonConvergenceError",
    "NotPositiveDefiniteError",
    "UnsupportedQueryError",
    "VbsensError",
    "__version__",
]
