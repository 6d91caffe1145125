"""Representation learning for stochastic dynamical systems.

Feature maps are trained to maximize covariance-based projection scores;
the learned representation then feeds transfer-operator or generator
regression, spectral decomposition and forecasting.  Exact quadrature /
finite-difference oracles for small benchmark systems make every piece
verifiable at the desk.
"""

from . import data, features, linalg, regression, scores, systems, trainer

__version__ = "0.1.0"

__all__ = [
    "data",
    "features",
    "linalg",
    "regression",
    "scores",
    "systems",
    "trainer",
    "__version__",
]
