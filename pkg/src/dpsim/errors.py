"""Exception types shared across the simulator."""


class SimError(Exception):
    """Base class for all simulator errors."""


class InvalidParams(SimError, ValueError):
    """A distribution or config parameter is out of its legal domain."""


class SchemaError(SimError):
    """A config document failed validation.

    The offending element path is kept on the exception so callers can
    surface it (CLI exit code 4, HTTP 400).
    """

    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class UnknownNode(SimError):
    """A node id that was never added to the network."""


class DuplicateId(SimError):
    """Attempt to add a node id that already exists."""


class OriginDown(SimError):
    """An operation was started from a node that is not WORKING."""


class ForbiddenBroadcastKind(SimError):
    """broadcast() was asked to carry a query kind; flooding is not allowed."""


class IllegalTransition(SimError):
    """A peer lifecycle transition outside the allowed state machine."""


class UnsupportedOperation(SimError):
    """The protocol does not implement the requested operation."""


class QuiescenceTimeout(SimError):
    """run_until_quiescent exceeded its tick budget with messages in flight."""


class NoEligibleNode(SimError):
    """sample_live found no WORKING node outside the exception list."""


class NoWorkers(SimError):
    """A shard map was requested over an empty worker list."""


class WorkerUnreachable(SimError):
    """A remote worker died or timed out mid-run."""


class TickTimeout(WorkerUnreachable):
    """A worker failed to acknowledge a tick within the deadline."""


class SessionConflict(SimError):
    """The control API is at capacity or the session is in the wrong state."""


class UnknownSession(SimError):
    """A session id the control API has never issued."""
