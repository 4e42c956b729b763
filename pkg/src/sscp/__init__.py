"""Two-stage subspace-constrained precoding for multi-cell massive MIMO."""

__version__ = "0.1.0"

from .errors import ConfigurationError, InfeasibleError, NumericalError, SingularClusterError

__all__ = [
    "ConfigurationError",
    "InfeasibleError",
    "NumericalError",
    "SingularClusterError",
    "__version__",
]
