from typing import Iterable, Optional


class MevAnalyticsError(Exception):
    """Base class for every error raised by the toolkit"""


class InputError(MevAnalyticsError, ValueError):
    """Caller passed data the operation cannot work with"""


class ConfigurationError(MevAnalyticsError, ValueError):
    """Configuration or file layout is unusable"""


class DataError(MevAnalyticsError, ValueError):
    """Chain data breaks a structural invariant (block indices etc.)"""


class DomainError(MevAnalyticsError, ValueError):
    """Parameters fall outside the model's domain"""


class UndefinedRatioError(MevAnalyticsError, ValueError):
    pass


class InferenceError(MevAnalyticsError, ValueError):
    """Pool reserves could not be inferred from observed swaps"""


class UndefinedStatisticError(MevAnalyticsError, ValueError):
    pass


class MissingPriceError(MevAnalyticsError, KeyError):
    def __init__(self, date):
        self.date = date
        super().__init__(f"No price row for {date}")

    def __str__(self):
        return self.args[0]


class RankDeficientError(MevAnalyticsError, ValueError):
    def __init__(self, columns: Iterable[str]):
        self.columns = list(columns)
        super().__init__(f"Design matrix is rank deficient; collinear columns: {', '.join(self.columns)}")


class StageError(MevAnalyticsError):
    """A pipeline stage failed for one day"""

    def __init__(self, stage: str, day: Optional[str], cause: Exception):
        self.stage = stage
        self.day = day
        self.cause = cause
        where = f"{stage} ({day})" if day else stage
        super().__init__(f"{where} failed: {cause}")
