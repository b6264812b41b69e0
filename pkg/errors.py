"""
Exception hierarchy shared by every actorloop component
"""


class ActorLoopError(Exception):
    """Base class for framework errors"""


class ProtocolError(ActorLoopError):
    """A component was called out of the reset/observe_first/observe order"""


class SpecViolationError(ActorLoopError):
    """An action or observation does not match its declared spec"""


class DivergenceError(ActorLoopError):
    """Non-finite values appeared in losses, gradients, outputs or ratios"""


class ClosedTableError(ActorLoopError):
    """The replay table has been shut down"""


class TransientError(ActorLoopError):
    """A shared service was temporarily unreachable"""


class ConfigurationError(ActorLoopError):
    """Invalid configuration or flag combination"""


class SchemaMismatchError(ActorLoopError):
    """A payload or dataset carries an unexpected schema tag"""

    def __init__(self, expected: int, found: int, what: str = "payload"):
        super().__init__(f"{what} schema mismatch: expected tag {expected}, found {found}")
        self.expected = expected
        self.found = found


class ChecksumError(ActorLoopError):
    """A checkpoint or dataset file failed its integrity check"""
