"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration errors exit 2,
infeasible problems exit 3, numerical failures exit 4.
"""


class ConfigurationError(ValueError):
    """Invalid configuration, schema violation or inconsistent inputs."""


class InfeasibleError(RuntimeError):
    """A requested construction cannot be satisfied (admission-control signal)."""


class NumericalError(RuntimeError):
    """A numerical routine failed (singular system, no convergence, ...)."""


class SingularClusterError(NumericalError):
    """Effective channel matrix of a cluster is rank deficient."""

    def __init__(self, message, cluster=None):
        super().__init__(message)
        self.cluster = cluster
