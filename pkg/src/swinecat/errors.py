"""Exception hierarchy shared by every module."""


class SwinEcatError(Exception):
    pass


class ConfigurationError(SwinEcatError, ValueError):
    """Invalid hyperparameter or structurally impossible setting."""


class DimensionError(SwinEcatError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(SwinEcatError, ValueError):
    """A caller violated an operation's precondition."""


class IngestionError(SwinEcatError):
    """An image or manifest could not be read or is degenerate."""


class FormatError(SwinEcatError):
    """A checkpoint file is corrupt, truncated, or of an unknown version."""


class CompatibilityError(SwinEcatError):
    """A checkpoint does not match the model configuration."""
