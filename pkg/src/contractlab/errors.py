"""Exception types shared across the package."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class ConvergenceError(RuntimeError):
    """A numerical solver failed to reach its tolerance."""


class DependencyError(RuntimeError):
    """A required upstream result has not been computed."""
