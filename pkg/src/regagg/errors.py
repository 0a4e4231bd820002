"""Exception hierarchy. Each family maps to a distinct CLI exit code."""


class RegAggError(Exception):
    exit_code = 1


class ConfigError(RegAggError, ValueError):
    exit_code = 2


class DimensionError(ConfigError):
    pass


class DataError(RegAggError):
    exit_code = 3


class FormatError(DataError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DatasetError(DataError):
    pass


class IngestionError(DataError):
    pass


class EvaluationError(DataError):
    pass


class NumericError(RegAggError, ArithmeticError):
    exit_code = 4


class DegenerateDescriptorError(NumericError):
    pass


class ContractError(RegAggError):
    exit_code = 5


class LossError(ContractError):
    pass
