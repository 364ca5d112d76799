# ===========================================
# errors.py
# ===========================================

## \file errors.py
## \brief Exception types shared by the model, simulator and pipeline packages.
##
## \details
## \par Exit codes (see `scripts/cli.py`)
##     - ConfigError                          -> 1
##     - DataError, FormatError, missing file -> 2
##     - NumericError                         -> 3


class ShapeError(ValueError):
    """!Array width or layer width mismatch."""


class NumericError(ArithmeticError):
    """!Non-finite input, gradient or loss."""


class DataError(ValueError):
    """!Input data violates a domain invariant (missing agent, non-monotone frames, ...)."""


class FormatError(DataError):
    """!File does not follow the expected layout (bad magic, missing column, ...)."""


class ContractError(RuntimeError):
    """!Caller broke an operation's precondition (stale cache, unaligned transition)."""


class EmptyBufferError(RuntimeError):
    """!Sampling from a replay buffer with no transitions."""


class DegenerateInputError(ValueError):
    """!Statistical test input without any variance."""


class ConfigError(ValueError):
    """!Unknown key or unparseable value in a configuration source."""
