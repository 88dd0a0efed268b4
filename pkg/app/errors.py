"""
Иерархия исключений верстака.
Каждое семейство ошибок соответствует своему коду выхода CLI.
"""

from typing import Optional


class WorkbenchError(Exception):
    """Базовая ошибка верстака."""

    exit_code: int = 1


class ConfigError(WorkbenchError):
    """Неверная конфигурация или параметры операции."""

    exit_code = 2


class DataError(WorkbenchError):
    """Некорректные входные данные."""

    exit_code = 3


class NumericalError(WorkbenchError):
    """Численный сбой при вычислениях."""

    exit_code = 4


# --- ConfigError ---

class InvalidRange(ConfigError):
    pass


class KTooLarge(ConfigError):
    pass


class InconsistentDims(ConfigError):
    pass


class EmptyPriorSet(ConfigError):
    pass


class StrategyUnavailable(ConfigError):
    pass


# --- DataError ---

class MissingSection(DataError):
    pass


class FormatError(DataError):
    """Ошибка формата с указанием места (файл, строка, запись)."""

    def __init__(self, message: str, locus: Optional[str] = None):
        self.locus = locus
        super().__init__(f"{locus}: {message}" if locus else message)


class RangeError(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class ImageTooSmall(DataError):
    pass


class DimensionMismatch(DataError):
    pass


DimMismatch = DimensionMismatch


class ZeroVector(DataError):
    pass


class LengthMismatch(DataError):
    pass


class TooFewPoints(DataError):
    pass


class NoPairs(DataError):
    pass


class TOutOfRange(DataError):
    pass


class DuplicateToken(DataError):
    pass


class TokenNotInCaption(DataError):
    pass


class SingleClassOnly(DataError):
    pass


# --- NumericalError ---

class DegenerateCovariance(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    """Лосс стал NaN/Inf; хранит номер шага."""

    def __init__(self, step: int, value: float):
        self.step = step
        self.value = value
        super().__init__(f"Non-finite loss {value} at step {step}")
