"""Exception types shared across the package."""


class RagsumError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RagsumError, ValueError):
    """Tensor dimensions do not line up for the requested operation."""


class ContractError(RagsumError, ValueError):
    """A caller violated a documented precondition."""


class DegenerateInputError(RagsumError, ValueError):
    """Input admits no valid output (e.g. a fully masked softmax row)."""


class NumericError(RagsumError, ArithmeticError):
    """A numeric degeneracy (zero norm) or non-finite value was produced."""


class IngestionError(RagsumError, ValueError):
    """Corpus-level problem: empty corpus, duplicate document ids."""


class SchemaError(RagsumError, ValueError):
    """A dataset line is malformed or misses a required field."""


class ConfigError(RagsumError, ValueError):
    """Invalid configuration value or combination."""


class RetrievalError(RagsumError, RuntimeError):
    """Search against the memory index cannot be satisfied."""


class RetrievalUnderflowError(RetrievalError):
    """Fewer non-excluded entries than requested; carries the shortfall."""

    def __init__(self, message: str, shortfall: int):
        super().__init__(message)
        self.shortfall = shortfall
