"""Exception hierarchy and warning types used across the package."""


class CimxError(Exception):
    """Base class for all package-specific errors."""


class InvalidRatio(CimxError):
    """Downsampling ratio is below the allowed minimum."""


class EmptyMaskError(CimxError):
    """A bounding box was requested for a mask with no set pixels."""


class CorruptStore(CimxError):
    """An exemplar record or archive manifest failed validation."""


class NonFiniteInput(CimxError):
    """An activation input contained NaN or Inf values."""


class ShapeMismatch(CimxError):
    """Tensor shapes are inconsistent with the model configuration."""


class NonFiniteLoss(CimxError):
    """A training loss became NaN or Inf; the phase is aborted."""


class BudgetExhausted(CimxError):
    """Not even the highest-priority exemplar fits in the memory share."""


class InvalidSchedule(CimxError):
    """Phase/class counts are incompatible with the chosen protocol."""


class DatasetError(CimxError):
    """Dataset directory is malformed or a file is unreadable."""


class ConfigError(CimxError):
    """Config file contains unknown keys or ill-typed values."""


class CollapseWarning(UserWarning):
    """Generated soft masks have become nearly identical across images."""
