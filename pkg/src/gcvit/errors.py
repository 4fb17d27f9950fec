"""Exception hierarchy shared by every module of the package."""


class GCViTError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GCViTError, ValueError):
    """Tensor shapes or spatial extents do not conform."""


class ConfigError(GCViTError, ValueError):
    """A configuration value violates a structural invariant."""


class ContractError(GCViTError, RuntimeError):
    """An operation was called outside its precondition."""


class FormatError(GCViTError, ValueError):
    """A file on disk is malformed or inconsistent with its header."""


class NonFiniteError(GCViTError, FloatingPointError):
    """NaN or Inf detected in tensor data."""
