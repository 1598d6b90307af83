from collections import namedtuple
from typing import Iterable, Optional

Violation = namedtuple("Violation", "constraint message values")


class KPZError(Exception):
    exit_code = 1


class ConfigError(KPZError):
    """Raised when a configuration cannot be used. Every violated constraint
    is reported at once through ``violations``.

    Params
    -------
    violations : Iterable[Violation]
        The failed constraints, each with its name and the offending values.
    """

    exit_code = 2

    def __init__(self, violations: Iterable[Violation]):
        self.violations = list(violations)
        lines = [f"{v.constraint}: {v.message} {v.values}" for v in self.violations]
        super().__init__("; ".join(lines))


class MisalignmentError(ConfigError):
    def __init__(self, message: str, **values):
        super().__init__([Violation("dyadic-alignment", message, values)])


class InvalidArgumentError(KPZError, ValueError):
    exit_code = 2


class InvariantViolation(KPZError):
    exit_code = 3


class PositivityLossError(InvariantViolation):
    def __init__(self, step: int, site: tuple, value: float):
        self.step = step
        self.site = site
        self.value = value
        super().__init__(f"u={value:.3e} at site {site} after step {step}")


class WrapContaminationError(InvariantViolation):
    pass


class NumericOverflowError(KPZError, ArithmeticError):
    exit_code = 4

    def __init__(self, message: str, index: Optional[int] = None):
        self.index = index
        if index is not None:
            message = f"{message} (sample {index})"
        super().__init__(message)


class ArchiveSizeError(KPZError):
    pass


class QuadratureError(KPZError, ArithmeticError):
    exit_code = 4

    def __init__(self, order: int, change: float):
        self.order = order
        self.change = change
        super().__init__(f"no agreement at quadrature order {order}, last relative change {change:.3e}")
