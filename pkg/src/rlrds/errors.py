"""Shared exception types.

Errors are split by how the command-line layer reports them: configuration
problems (bad inputs, inconsistent settings) exit with code 2, numerical
failures (singular fits, non-convergence, simulation die-out) with code 3.
"""


class ConfigError(ValueError):
    """Invalid configuration or arguments."""


class NumericalError(RuntimeError):
    """A numerical procedure failed (singular system, non-convergence, die-out)."""


class SingularFitError(NumericalError):
    """Degenerate design in a likelihood block; names the offending piece."""
