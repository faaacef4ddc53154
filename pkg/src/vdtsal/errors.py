"""Exception types shared across the package."""


class VdtsalError(Exception):
    pass


class ConfigError(VdtsalError):
    """Invalid configuration value or malformed config file."""


class DataError(VdtsalError):
    pass


class MissingModalityError(DataError):
    """A sample stem lacks one of the V/D/T/GT rasters."""


class EmptyDatasetError(DataError):
    pass


class DecodeError(DataError):
    """A raster file exists but cannot be decoded."""


class ShapeMismatchError(DataError):
    pass


class ResolutionError(VdtsalError):
    """Input resolution violates the encoder's divisibility contract."""


class HeadDivisibilityError(VdtsalError):
    """Token channel count is not divisible by the attention head count."""


class MissingCheckpointError(VdtsalError):
    """A prerequisite checkpoint is absent or lacks the required stages."""


class NonFiniteLossError(VdtsalError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, step, components):
        self.step = step
        self.components = dict(components)
        detail = ", ".join(f"{k}={v}" for k, v in self.components.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")


class UnknownScopeError(VdtsalError):
    """freeze/unfreeze asked for a module path that does not exist."""


class MissingPredictionError(DataError):
    """Evaluation found a ground-truth mask without a matching prediction."""
