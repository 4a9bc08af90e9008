"""Exception types raised across the package."""


class FTDBAError(Exception):
    """Base class for all package errors."""


class DepthTooLarge(FTDBAError):
    pass


class BadGranularity(FTDBAError):
    pass


class InsufficientScales(FTDBAError):
    pass


class OutOfRange(FTDBAError):
    pass


class SideTooSmall(FTDBAError):
    pass


class AnchorOutOfBounds(FTDBAError):
    pass


class DimensionMismatch(FTDBAError):
    pass


class DegenerateProfile(FTDBAError):
    pass


class ZeroSpectrum(FTDBAError):
    pass


class EmptyDataset(FTDBAError):
    pass


class UntrainedModel(FTDBAError):
    pass


class TooFewSamples(FTDBAError):
    pass


class NonFiniteGradient(FTDBAError):
    """A client produced a non-finite update; carries the offending client id."""

    def __init__(self, client_id, message=None):
        self.client_id = client_id
        super().__init__(message or f"non-finite gradient from client {client_id}")


class EmptyRound(FTDBAError):
    pass


class TargetUnreachable(FTDBAError):
    pass


class InsufficientHistory(FTDBAError):
    pass


class TooFewClients(FTDBAError):
    pass


class UnknownParameter(FTDBAError):
    pass


class ConfigError(FTDBAError):
    pass
