"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor shapes are inconsistent for an operation."""


class ContractError(ValueError):
    """Raised when a caller violates an operation's preconditions."""


class ParseError(ValueError):
    """Raised on malformed input files; message names the byte offset."""
