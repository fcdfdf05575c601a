"""Exception types.

Everything a caller can fix by changing its input derives from
``ValidationError`` (the CLI maps these to exit code 1). Numerical
failures during fitting derive from ``ComputationError`` (exit code 2).
"""


class LastMileError(Exception):
    pass


class ValidationError(LastMileError, ValueError):
    pass


class ComputationError(LastMileError, ArithmeticError):
    pass


# geo
class OutOfRange(ValidationError):
    pass


class CityMismatch(ValidationError):
    pass


# ingest
class ParseError(ValidationError):
    pass


class EmptyCollection(ValidationError):
    pass


class SchemaError(ValidationError):
    pass


class RowValidationError(ValidationError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class IngestError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


# models
class ShapeError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class DegenerateSample(ValidationError):
    pass


class InsufficientData(ValidationError):
    pass


class InsufficientCalibration(ValidationError):
    pass


class DivergenceError(ComputationError):
    pass


# metrics / eval
class LengthMismatch(ValidationError):
    pass


class TooFewGroups(ValidationError):
    pass


class TooFewSamples(ValidationError):
    pass


class TooFewHexes(ValidationError):
    pass


class NoDeliveries(ValidationError):
    pass
