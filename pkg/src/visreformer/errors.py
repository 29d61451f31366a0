"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: usage problems exit 2, ingestion and
I/O problems exit 3, anything reporting a broken invariant exits 1.
"""


class VisReformerError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(VisReformerError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(VisReformerError, ValueError):
    """A normalisation row (softmax or pooling) has no unmasked entry."""


class NonFiniteError(VisReformerError, ArithmeticError):
    """An operation produced NaN or Inf."""


class ContractError(VisReformerError, ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(VisReformerError, ValueError):
    """Invalid configuration value or preset."""


class DataError(VisReformerError, ValueError):
    """Dataset content is invalid (e.g. label out of range)."""


class IngestionError(VisReformerError, OSError):
    """A data file is missing or truncated."""


class FairnessError(VisReformerError, ValueError):
    """Two model configurations are not capacity-matched.

    ``fields`` lists the offending configuration fields.
    """

    def __init__(self, fields, message=None):
        self.fields = list(fields)
        super().__init__(message or f"configs differ in: {', '.join(self.fields)}")


class InternalError(VisReformerError, RuntimeError):
    """An internal consistency check failed."""
