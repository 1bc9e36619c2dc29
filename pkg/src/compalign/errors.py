"""Exception hierarchy shared across the package."""


class CompalignError(Exception):
    """Base class for all package errors."""


class CapacityError(CompalignError, ValueError):
    """A scene asks for more objects than the grid (or the desk-scale cap) allows."""


class ApplicabilityError(CompalignError, ValueError):
    """A perturbation category cannot be applied to the given scene."""


class DimensionError(CompalignError, ValueError):
    """Image dimensions do not match a supported canvas."""


class UndefinedAccuracyError(CompalignError, ValueError):
    """Accuracy over an empty question list is undefined."""


class RangeError(CompalignError, ValueError):
    """A timestep or weight lies outside its valid range."""


class EmptyInputError(CompalignError, ValueError):
    """An operation that needs at least one item received none."""


class DivergenceError(CompalignError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class PlanningError(CompalignError):
    """No edit plan can be built for a misalignment."""


class MissingArtifactError(CompalignError, FileNotFoundError):
    """A command needs an artifact from an earlier stage that does not exist."""

    def __init__(self, path):
        super().__init__(f"missing artifact: {path}")
        self.path = path


class BackendError(CompalignError):
    """Base class for failures talking to an external service."""

    retryable = False


class TransportError(BackendError):
    """The request never produced a usable HTTP response (timeout, refused, 5xx)."""

    retryable = True


class ProtocolError(BackendError):
    """The service answered, but the payload violates the wire protocol."""

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = payload
