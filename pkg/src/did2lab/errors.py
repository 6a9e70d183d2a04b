"""Exception hierarchy shared by every module."""


class Did2Error(Exception):
    """Base class for all library errors."""


class ShapeError(Did2Error, ValueError):
    pass


class ArgumentError(Did2Error, ValueError):
    pass


class NumericError(Did2Error, ArithmeticError):
    pass


class ConfigError(Did2Error, ValueError):
    pass


class SamplingError(Did2Error, RuntimeError):
    pass


class ProtocolError(Did2Error, ValueError):
    pass


class IngestionError(Did2Error, OSError):
    pass


class CheckpointError(Did2Error, OSError):
    """Malformed checkpoint; ``section`` names the part that failed to parse."""

    def __init__(self, section, message):
        super().__init__(f"[{section}] {message}")
        self.section = section
