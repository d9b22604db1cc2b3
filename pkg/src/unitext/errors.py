"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated by the caller."""


class ConfigError(ValueError):
    """A configuration value is missing, out of range or inconsistent."""


class FormatError(ValueError):
    """A file does not follow its declared on-disk format."""


class ParseError(FormatError):
    """A text file line could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericError(FloatingPointError):
    """A non-finite value appeared in a tensor operation."""
