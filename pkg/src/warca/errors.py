"""Exception hierarchy shared across the package.

Each error carries a short machine-readable ``category`` that the CLI maps
to an exit code: config/validation -> 1, io -> 2, resource -> 3, numerical -> 4.
"""


class WarcaError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(WarcaError):
    """Invalid configuration value or combination (bad flag, p_test >= Q, ...)."""

    category = "config"
    exit_code = 1


class ValidationError(WarcaError):
    """Data fails an invariant (non-finite values, label gaps, domain violations)."""

    category = "validation"
    exit_code = 1


class ProtocolError(ValidationError):
    """Evaluation protocol cannot run (single-image identity, probe id missing)."""

    category = "protocol"


class EmptyPairsError(ValidationError):
    """No same-label pair exists, so rank-based training is impossible."""

    category = "validation"


class FormatError(WarcaError):
    """A file does not parse under its declared format."""

    category = "io"
    exit_code = 2


class ResourceError(WarcaError):
    """A configured resource cap was exceeded."""

    category = "resource"
    exit_code = 3


class NumericalError(WarcaError):
    """A numerical operation produced no usable result."""

    category = "numerical"
    exit_code = 4
