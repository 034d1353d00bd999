"""Exception and warning types.

Every error carries an ``exit_code`` so the CLI can map failures to distinct
process exit statuses.
"""


class LidarPlaceError(Exception):
    exit_code = 1


# ingest
class TruncatedRecord(LidarPlaceError):
    exit_code = 10


class NonFiniteValue(LidarPlaceError):
    exit_code = 11


class MalformedLine(LidarPlaceError):
    exit_code = 12

    def __init__(self, line_no: int, msg: str = ""):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {msg}" if msg else f"line {line_no}")


class NonOrthonormalRotation(MalformedLine):
    exit_code = 13


class InvalidConfig(LidarPlaceError):
    exit_code = 14


# backbone / train
class ShapeMismatch(LidarPlaceError):
    exit_code = 20


class NegativeVariance(LidarPlaceError):
    exit_code = 21


class UnknownPreset(LidarPlaceError):
    exit_code = 22


class NonFiniteGradient(LidarPlaceError):
    exit_code = 23

    def __init__(self, layer: int):
        self.layer = layer
        super().__init__(f"non-finite gradient at layer {layer}")


class NoValidTriplets(LidarPlaceError):
    exit_code = 24


class DimensionMismatch(LidarPlaceError):
    exit_code = 25


class FormatError(LidarPlaceError):
    """Container file has a bad magic, version or manifest."""

    exit_code = 26


# quant
class EmptyCalibration(LidarPlaceError):
    exit_code = 30


class MissingStats(LidarPlaceError):
    exit_code = 31


# retrieval / metrics
class NormViolation(LidarPlaceError):
    exit_code = 40

    def __init__(self, row: int, norm: float):
        self.row = row
        super().__init__(f"row {row} has norm {norm:.6g}")


class EmptyCandidateSet(LidarPlaceError):
    exit_code = 41


class NoQueries(LidarPlaceError):
    exit_code = 42


# harness
class ReportError(LidarPlaceError):
    exit_code = 50


class PipelineError(LidarPlaceError):
    """Wraps a module error with the pipeline stage it came from."""

    exit_code = 51

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        if isinstance(cause, LidarPlaceError):
            self.exit_code = cause.exit_code
        super().__init__(f"[{stage}] {cause}")


class DegenerateDescriptor(UserWarning):
    """A descriptor had (near) zero norm before normalization."""


class NonFiniteWarning(UserWarning):
    """An inf/NaN appeared in a reduced-precision forward pass."""
