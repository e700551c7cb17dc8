"""Exception hierarchy shared across the package."""


class BackflowError(Exception):
    """Base class for all package errors."""


class ConfigError(BackflowError, ValueError):
    """Invalid or inconsistent configuration."""


class PoleError(BackflowError, ValueError):
    """The decay rate was sampled exactly on one of its poles."""


class PositivityError(BackflowError, ArithmeticError):
    """A propagated state left the set of positive semidefinite matrices."""


class DivergenceError(BackflowError, FloatingPointError):
    """A loss, gradient or objective value became non-finite."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class EpisodeFinishedError(BackflowError, RuntimeError):
    """``step`` was called on an environment whose episode already ended."""
