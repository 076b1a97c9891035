"""Exception hierarchy shared by every module.

Each error carries an ``exit_code`` so the CLI can map failures onto its
documented codes (2 config, 3 data, 4 numeric) without a lookup table.
"""

from __future__ import annotations


class OpeError(Exception):
    """Base class for all package errors."""

    exit_code = 4


class ConfigError(OpeError):
    exit_code = 2


class InvalidConfig(ConfigError):
    pass


class DataError(OpeError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(DataError):
    def __init__(self, message: str, missing: list[str] | None = None):
        self.missing = list(missing or [])
        if self.missing:
            message = f"{message} (missing: {', '.join(self.missing)})"
        super().__init__(message)


class MissingArtifact(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class EmptyInput(DataError):
    pass


class DegenerateActions(DataError):
    pass


class DegenerateSample(DataError):
    pass


class NumericError(OpeError):
    exit_code = 4


class ZeroControl(NumericError):
    """Lift is undefined because the control metric is zero."""


class ZeroTruth(NumericError):
    pass


class AllWeightsZero(NumericError):
    """Every importance weight is zero: the evaluation policy puts no mass on logged actions."""


class MissingRewardModel(OpeError):
    exit_code = 2


class NonDifferentiableKernel(ConfigError):
    pass


class EmptyGrid(ConfigError):
    pass
