"""Exception types shared across the package."""


class S2Error(Exception):
    """Base class for all package errors."""


class InvalidArgument(S2Error, ValueError):
    pass


class ContractViolation(S2Error, RuntimeError):
    """A callee returned something that breaks its declared contract."""


class TrainingDiverged(S2Error, RuntimeError):
    pass


class PerceptionError(S2Error, RuntimeError):
    pass


class ProtocolError(PerceptionError):
    """Malformed response or a 4xx from a perception service."""


class RetryableTransportError(PerceptionError):
    """5xx or timeout from a perception service; safe to retry."""


class UnsupportedFormat(S2Error, ValueError):
    pass


class CorruptionError(S2Error, IOError):
    pass


class EnvironmentMisconfiguration(S2Error, RuntimeError):
    pass
