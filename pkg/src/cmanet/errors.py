"""Contains shared error types that can be raised from the cmanet pipeline"""


class CmanetError(Exception):
    """Base class for every error the pipeline raises on purpose.

    ``exit_code`` is the process status the command line returns for it.
    """

    exit_code: int = 1


class DimensionError(CmanetError):
    """Raised when operand shapes disagree"""

    exit_code = 3

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes

        rendered = " vs ".join(str(tuple(shape)) for shape in shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class NumericError(CmanetError):
    """Raised when a NaN or an infinity shows up where finite values are required"""

    exit_code = 4


class NonFiniteLossError(NumericError):
    def __init__(self, batch_index: int, loss: float):
        self.batch_index = batch_index
        self.loss = loss

        super().__init__(f"Non-finite loss {loss} at batch {batch_index}")


class NonFiniteGradientError(NumericError):
    def __init__(self, parameter: str):
        self.parameter = parameter

        super().__init__(f"Non-finite gradient for parameter '{parameter}'")


class ContractError(CmanetError):
    """Raised when an operation is called outside its preconditions"""

    exit_code = 5


class ConfigError(CmanetError):
    """Raised for unreadable, invalid or contradictory configuration"""

    exit_code = 6


class FormatError(CmanetError):
    """Raised when a dataset or checkpoint file cannot be trusted"""

    exit_code = 7

    def __init__(self, path: str, detail: str):
        self.path = path
        self.detail = detail

        super().__init__(f"{path}: {detail}")


class BadMagicError(FormatError):
    def __init__(self, path: str, expected: bytes, found: bytes):
        self.expected = expected
        self.found = found

        super().__init__(path, f"bad magic {found!r}, expected {expected!r}")


class VersionMismatchError(FormatError):
    def __init__(self, path: str, expected: int, found: int):
        self.expected = expected
        self.found = found

        super().__init__(
            path, f"unsupported format version {found}, expected {expected}"
        )


class TruncatedFileError(FormatError):
    def __init__(self, path: str, expected_bytes: int, found_bytes: int):
        self.expected_bytes = expected_bytes
        self.found_bytes = found_bytes

        super().__init__(
            path,
            f"file is {found_bytes} bytes but its header declares {expected_bytes}",
        )


class ShapeInconsistencyError(FormatError):
    """Raised when header shapes contradict each other or the payload"""


class GradientCheckFailed(CmanetError):
    exit_code = 8

    def __init__(self, max_rel_error: float, tolerance: float):
        self.max_rel_error = max_rel_error
        self.tolerance = tolerance

        super().__init__(
            f"Gradient check failed: max relative error {max_rel_error:.3e} "
            f">= tolerance {tolerance:.1e}"
        )


__all__ = [
    "BadMagicError",
    "CmanetError",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "FormatError",
    "GradientCheckFailed",
    "NonFiniteGradientError",
    "NonFiniteLossError",
    "NumericError",
    "ShapeInconsistencyError",
    "TruncatedFileError",
    "VersionMismatchError",
]
