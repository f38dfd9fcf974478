"""Error taxonomy shared across the package.

Exit-code mapping lives in the CLI: ConfigError -> 2, DivergenceError -> 3,
FormatError -> 4. Everything else is a plain bug and escapes as itself.
"""


class CodequantError(Exception):
    """Base class for package-raised errors."""


class ShapeError(CodequantError, ValueError):
    """Dimension or dtype mismatch between operands."""


class SingularMatrixError(CodequantError):
    """Matrix is singular to working precision."""


class ConfigError(CodequantError):
    """Invalid configuration value or combination."""


class StageError(ConfigError):
    """Pipeline stage applied out of order (e.g. folding a rotation twice)."""


class DivergenceError(CodequantError):
    """An optimization or forward pass produced non-finite values."""


class FormatError(CodequantError):
    """Malformed container or report input."""
