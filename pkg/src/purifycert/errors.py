from typing import Any, Dict, List, Optional

from torch import Tensor


class PurifyCertError(Exception):
    """Base class of every error raised by purifycert."""


class DimensionMismatchError(PurifyCertError, ValueError):
    """Raised when a point's dimension does not match the distribution's."""

    def __init__(self, message: str, tensor: Optional[Tensor] = None):
        super().__init__(message)
        # the tensor that caused the error
        self.tensor = tensor


class UnsupportedKindError(PurifyCertError, TypeError):
    """Raised when an operation is undefined for the distribution family."""


class SingularMarginalError(PurifyCertError, ValueError):
    """Raised when a prototype set is diffused with alpha_bar == 1."""


class InvalidRangeError(PurifyCertError, ValueError):
    pass


class NonFiniteStateError(PurifyCertError, FloatingPointError):
    """Raised when a reverse trajectory leaves the divergence box."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class DegenerateSigmaError(PurifyCertError, ValueError):
    pass


class TooFewSamplesError(PurifyCertError, ValueError):
    pass


class NoOtherLabelsError(PurifyCertError, ValueError):
    pass


class ZeroMassError(PurifyCertError, ValueError):
    pass


class CenterOutsideError(PurifyCertError, ValueError):
    pass


class InvalidCountsError(PurifyCertError, ValueError):
    pass


class ConfigInvalidError(PurifyCertError, ValueError):
    """Raised when a config fails validation; keeps the full error list."""

    def __init__(self, errors: List[Dict[str, Any]]):
        lines = [f"{e['path']}: {e['message']}" for e in errors]
        super().__init__("invalid config:\n  " + "\n  ".join(lines))
        self.errors = errors


class ComputeFailureError(PurifyCertError, RuntimeError):
    pass


class IoFailureError(PurifyCertError, OSError):
    pass
