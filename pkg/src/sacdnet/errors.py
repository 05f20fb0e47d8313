"""Exception hierarchy shared by all modules.

The CLI maps each family onto an exit code: usage/config problems exit 1,
data problems exit 2 and numeric failures exit 3.
"""


class SACDError(Exception):
    exit_code = 2


class ConfigError(SACDError, ValueError):
    exit_code = 1


class DataError(SACDError):
    exit_code = 2


class LoadError(DataError):
    """A weights file or checkpoint could not be read."""


class StructuralError(DataError, ValueError):
    """Shapes or channel counts do not line up."""


class DimensionError(StructuralError):
    """Image height/width violate the stride contract."""


class DomainError(DataError, ValueError):
    """Values outside the admissible set (e.g. a non-binary mask)."""


class CapacityError(DataError):
    """A source has too few samples to draw from."""


class CompatibilityError(DataError):
    """A checkpoint was produced by an incompatible architecture config."""


class NumericError(SACDError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics
