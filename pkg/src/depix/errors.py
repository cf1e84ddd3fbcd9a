"""Exception hierarchy shared by every stage of the pipeline."""


class DepixError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class ConfigError(DepixError, ValueError):
    """Invalid configuration, flags, or missing assets."""

    exit_code = 2


class InvalidInputError(DepixError, ValueError):
    """Input data is malformed (non-finite pixels, wrong value range)."""

    exit_code = 3


class ContractError(DepixError, ValueError):
    """A caller violated a shape or resolution precondition."""

    exit_code = 2


class DataError(DepixError):
    """Unreadable media, empty sources, or broken manifests."""

    exit_code = 3


class NumericError(DepixError, ArithmeticError):
    """A loss or output became NaN/Inf during training."""

    exit_code = 4


class UndefinedSimilarityError(DepixError, ValueError):
    """Cosine similarity requested for a zero-norm feature vector."""

    exit_code = 4
