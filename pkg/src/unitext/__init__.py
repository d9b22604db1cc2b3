"""Joint masked-token pre-training over discrete speech units and phoneme text."""

from .errors import (ConfigError, ContractError, DimensionError, FormatError, NumericError,
                     ParseError)
from .sequence import SPEECH, TEXT, TokenSequence

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DimensionError", "FormatError", "NumericError", "ParseError",
    "SPEECH", "TEXT", "TokenSequence", "__version__",
]
