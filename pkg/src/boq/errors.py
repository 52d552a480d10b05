"""Exception hierarchy shared across the package.

Validation errors (bad shapes, files, configs) are distinguished from
runtime errors (numerical blowups, broken usage contracts) so the CLI can
map them to distinct exit codes.
"""


class BoqError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(BoqError):
    """Bad input that was detectable before doing any real work."""


class DimensionError(ValidationError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(ValidationError):
    """Invalid or inconsistent configuration."""


class ManifestError(ValidationError):
    """Malformed or inconsistent dataset manifest."""


class DatasetError(ValidationError):
    """Dataset cannot support the requested operation (e.g. too few places)."""


class FormatError(ValidationError):
    """Corrupt or unrecognized file content."""


class DegenerateInputError(ValidationError):
    """Mathematically degenerate input (e.g. normalizing a zero vector)."""


class EmptyInputError(ValidationError):
    """An operation received an empty token/key set."""


class ContractError(BoqError):
    """An API usage contract was violated."""


class NumericsError(BoqError):
    """Non-finite values appeared where finite ones are guaranteed."""


class DivergenceError(NumericsError):
    """Training diverged; carries the last good state.

    Attributes:
        result: the best checkpointed state reached before divergence
                (a ``training.TrainResult``), or None if no epoch finished.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result
