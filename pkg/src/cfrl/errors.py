"""Exception hierarchy shared by every cfrl module."""


class CfrlError(Exception):
    """Base class for all errors raised by cfrl."""


class ConstructionError(CfrlError, ValueError):
    """A model object (SCM, POMDP, policy, level) is malformed."""


class InputError(CfrlError, ValueError):
    """An argument is outside the domain an operation accepts."""


class CapacityError(CfrlError):
    """Exact enumeration would exceed the configured cap."""


class ContradictionError(CfrlError):
    """No noise assignment is consistent with the observed data."""


class GenerationError(CfrlError):
    """The level generator exhausted its attempts."""


class SupportCollapseError(CfrlError):
    """All importance weights are zero."""


class ImprovementError(CfrlError):
    """Policy improvement received a batch with no usable weight."""


class ConfigError(CfrlError):
    """Experiment or description file could not be parsed."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
