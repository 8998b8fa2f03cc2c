"""Information-constrained hierarchies of expert decision-makers.

A selection policy routes states (or whole tasks) to specialized experts;
selector and experts are trained online against free-energy objectives
that trade expected utility against KL divergence to adaptive priors. An
exact tabular solver provides ground truth for the discrete case.
"""

from .distrib import AbsoluteContinuityViolation, ResourceParams
from .oracle import HierSolution, TabularProblem, solve

__version__ = "0.1.0"

__all__ = [
    "AbsoluteContinuityViolation",
    "ResourceParams",
    "TabularProblem",
    "HierSolution",
    "solve",
    "__version__",
]
