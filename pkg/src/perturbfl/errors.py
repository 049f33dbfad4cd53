"""Exception hierarchy. Each class carries the CLI exit code it maps to."""

from __future__ import annotations


class PerturbFLError(Exception):
    exit_code = 1


class ShapeError(PerturbFLError, ValueError):
    """Operand dimensions do not line up."""

    exit_code = 5


class DomainError(PerturbFLError, ValueError):
    """Argument outside an operation's domain (e.g. a zero divisor)."""

    exit_code = 5


class UsageError(PerturbFLError, ValueError):
    exit_code = 5


class IngestionError(PerturbFLError):
    exit_code = 2


class ProtocolError(PerturbFLError):
    exit_code = 3


class FrameError(ProtocolError):
    """Malformed, truncated or oversize wire frame."""


class SchemaError(ProtocolError):
    """Frame body does not match any message schema."""


class VersionMismatch(ProtocolError):
    pass


class RoundTimeout(PerturbFLError):
    exit_code = 4


class VerificationFailure(PerturbFLError):
    exit_code = 1
