"""Exception types raised across the package.

Every error carries a short machine-readable ``code`` so the CLI and the
validation report can surface the same vocabulary.
"""


class StratmaError(Exception):
    code = "Error"


class DataError(StratmaError):
    """Input data violates the table schema."""

    code = "DataError"


class MalformedRow(DataError):
    code = "MalformedRow"

    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class DuplicateId(DataError):
    code = "DuplicateId"

    def __init__(self, unit_id: str):
        super().__init__(f"duplicate unit id {unit_id!r}")
        self.unit_id = unit_id


class InvalidArm(DataError):
    code = "InvalidArm"


class NonNumericValue(DataError):
    code = "NonNumericValue"


class SuspectedSentinel(DataError):
    code = "SuspectedSentinel"


class MissingColumn(DataError):
    code = "MissingColumn"


class CodedUnitMissingY(StratmaError):
    code = "CodedUnitMissingY"

    def __init__(self, unit_id: str):
        super().__init__(f"unit {unit_id!r} is in the draw but has no gold outcome")
        self.unit_id = unit_id


class UncodedUnit(StratmaError):
    code = "UncodedUnit"


class EmptyArmSample(StratmaError):
    code = "EmptyArmSample"


class StratumDrawMismatch(StratmaError):
    code = "StratumDrawMismatch"


class BudgetExceedsArm(StratmaError):
    code = "BudgetExceedsArm"


class BudgetTooSmall(StratmaError):
    code = "BudgetTooSmall"


class AllocationInfeasible(StratmaError):
    code = "AllocationInfeasible"


class StratumTooSmall(StratmaError):
    code = "StratumTooSmall"


class StratumTooSmallForVariance(StratmaError):
    code = "StratumTooSmallForVariance"


class UnknownVariable(StratmaError):
    code = "UnknownVariable"


class AllValuesEqual(StratmaError):
    code = "AllValuesEqual"


class EnumerationTooLarge(StratmaError):
    code = "EnumerationTooLarge"


class InvalidR2(StratmaError):
    code = "InvalidR2"


class NonpositiveWeights(StratmaError):
    code = "NonpositiveWeights"


class ConfigError(StratmaError):
    code = "ConfigError"
