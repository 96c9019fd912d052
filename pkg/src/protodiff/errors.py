"""Exception hierarchy shared across the package.

The service layer maps these onto HTTP error categories and the CLI maps
the categories onto exit codes, so keep the tree small and stable.
"""


class ProtodiffError(Exception):
    """Base class for all package-specific errors."""


class NonFiniteError(ProtodiffError, ArithmeticError):
    """A numeric operation produced NaN or Inf from finite inputs."""


class GraphError(ProtodiffError, RuntimeError):
    """Autodiff graph misuse: non-scalar backward, consumed graph, missing grads."""


class CheckpointError(ProtodiffError, ValueError):
    """Malformed or truncated parameter checkpoint."""


class ConfigError(ProtodiffError, ValueError):
    """Experiment configuration could not be parsed or validated."""


class MissingPrerequisiteError(ProtodiffError, FileNotFoundError):
    """A pipeline command was invoked before the artifacts it needs exist."""
