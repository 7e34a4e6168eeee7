"""Exception hierarchy. The CLI maps each family to an exit status."""


class CausalSegError(Exception):
    """Base class for all package errors."""


class ConfigError(CausalSegError, ValueError):
    """Invalid run configuration or invalid argument combination."""


class DataError(CausalSegError, ValueError):
    """Input data failed validation."""


class LearnerError(CausalSegError, RuntimeError):
    """A learner could not be fit."""


class RankDeficientError(LearnerError):
    pass


class ConvergenceError(LearnerError):
    def __init__(self, message, iterations):
        super().__init__(f"{message} (after {iterations} iterations)")
        self.iterations = iterations


class DegenerateError(CausalSegError, ValueError):
    """A statistical quantity is undefined for the given inputs."""


class StaleCacheError(CausalSegError):
    """Cached nuisance estimates do not belong to the supplied data."""
