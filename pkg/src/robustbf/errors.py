"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid network, solver or experiment configuration."""

    def __init__(self, message, key_path=None):
        self.key_path = key_path
        if key_path:
            message = f"{key_path}: {message}"
        super().__init__(message)


class DimensionError(ValueError):
    """A packed vector or array has the wrong length or shape."""


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


class ContractViolation(ValueError):
    """An operation was called while its precondition does not hold."""


class ProtocolError(RuntimeError):
    """A distributed node received a message it should never see."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared during an iterative computation.

    ``iteration`` names the step at which it was detected, ``history`` carries
    whatever trace the failing solver had accumulated and ``node`` is set by
    the distributed simulator.
    """

    def __init__(self, message, iteration=None, history=None, node=None, logical_time=None):
        self.iteration = iteration
        self.history = history
        self.node = node
        self.logical_time = logical_time
        parts = [message]
        if node is not None:
            parts.append(f"node={node}")
        if logical_time is not None:
            parts.append(f"logical_time={logical_time:g}")
        if iteration is not None:
            parts.append(f"iteration={iteration}")
        super().__init__(" ".join(parts))


class DegenerateCutWarning(RuntimeWarning):
    """A cut with an all-zero normal was generated (it excludes every point)."""
