"""Exception types shared across the package."""


class SizeError(ValueError):
    """Shape or length mismatch between operands."""


class DomainError(ValueError):
    """Input outside the domain of an operation (empty tensor, n < 2, ...)."""


class ContractError(RuntimeError):
    """A caller broke an API precondition."""


class ConfigError(ValueError):
    """Invalid or unsupported configuration."""


class FormatError(ValueError):
    """Unsupported file format or pixel layout."""


class DecodeError(ValueError):
    """A file could not be decoded (truncated or corrupt)."""


class LoadError(RuntimeError):
    """A checkpoint could not be loaded for the requested model."""


class ReplicaDivergenceError(RuntimeError):
    """Data-parallel replicas disagree on gradients or parameters."""


class TrainingAborted(RuntimeError):
    """A worker died or the run could not continue."""
