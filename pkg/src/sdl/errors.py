"""Exception hierarchy shared by every module."""


class SDLError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(SDLError, ValueError):
    pass


class InvalidAxis(SDLError, ValueError):
    pass


class NonScalarLoss(SDLError, ValueError):
    pass


class TapeNotRecording(SDLError, RuntimeError):
    pass


class NonFiniteValue(SDLError, FloatingPointError):
    pass


class NonFiniteEvaluation(SDLError, FloatingPointError):
    pass


class IndivisibleDimensions(SDLError, ValueError):
    pass


class InvalidDims(SDLError, ValueError):
    pass


class GateClosed(SDLError, RuntimeError):
    pass


class UnknownClass(SDLError, ValueError):
    pass


class ZeroNormVector(SDLError, ValueError):
    pass


class ZeroNormAtom(ZeroNormVector):
    pass


class OutOfRangeMu(SDLError, ValueError):
    pass


class InvalidEpoch(SDLError, ValueError):
    pass


class InvalidClass(SDLError, ValueError):
    pass


class ConfigError(SDLError, ValueError):
    """A configuration field is out of its allowed range."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class NonFiniteLoss(SDLError, FloatingPointError):
    pass


class CheckpointCorrupt(SDLError, OSError):
    pass


class NoPositives(SDLError, ValueError):
    pass
