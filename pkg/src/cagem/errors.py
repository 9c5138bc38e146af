"""Exception types shared across the package."""


class CagemError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(CagemError, ValueError):
    """Shapes of inputs do not match the declared dimensions."""


class ConfigError(CagemError, ValueError):
    """Invalid configuration or flag combination."""


class DataFormatError(CagemError, ValueError):
    """A dataset container or checkpoint failed validation."""


class DegenerateBatchError(CagemError, ValueError):
    """Batch too small for the requested operation (e.g. batch-norm stats)."""


class DegenerateDataError(CagemError, ValueError):
    """Data has no variance where variance is required (e.g. PCA input)."""


class NumericalError(CagemError, ArithmeticError):
    """A non-finite value appeared; the message names the offending term."""
