"""Exception types shared across the package."""


class RicekitError(Exception):
    """Base class for all package-specific errors."""


class VolumeFormatError(RicekitError):
    """Volume file pair is missing, malformed, or declares an unsupported encoding."""


class DegenerateInputError(RicekitError):
    """An operation received input it cannot meaningfully normalize (e.g. zero spread)."""


class InvalidDoseError(RicekitError):
    """Dose map violates dose semantics (negative values)."""


class GenerationError(RicekitError):
    """Synthetic subject generation could not satisfy a placement constraint."""


class ConfigError(RicekitError):
    """A configuration file or value is invalid."""


class TrainingDivergedError(RicekitError):
    """Loss or parameter update became non-finite during training."""


class FoldError(RicekitError):
    """Fold construction or fold-consistency check failed."""
