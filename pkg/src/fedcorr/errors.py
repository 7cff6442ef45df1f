"""Exception types raised by the simulator."""


class FedCorrError(Exception):
    """Base class for all simulator errors."""


class ParameterError(FedCorrError, ValueError):
    """An argument is out of range or inconsistent with the others."""


class DegenerateGeometryError(FedCorrError):
    """Too few positive-distance neighbours to estimate LID."""


class DivergenceError(FedCorrError, FloatingPointError):
    """Local training produced a non-finite loss."""


class ConfigError(FedCorrError, ValueError):
    """Invalid experiment configuration. ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
