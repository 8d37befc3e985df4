"""Exception hierarchy shared by every module in the package."""


class IrisError(Exception):
    """Base class for all errors raised by mobile_iris."""


class DimensionError(IrisError, ValueError):
    """Tensor or mask shapes are incompatible with an operation."""


class ConfigurationError(IrisError, ValueError):
    """A configuration, split, or argument combination is invalid."""


class StateError(IrisError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class EmptyMaskError(IrisError, ValueError):
    """A mask with no foreground pixels was passed where one is required."""


class ContainerError(IrisError):
    """Base class for weight-container read/write failures."""


class MagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


class TensorNameError(ContainerError):
    """Container tensor names do not match the model's parameter names."""


class TensorShapeError(ContainerError, DimensionError):
    """A stored tensor has a different shape than the model expects."""


class ManifestError(IrisError):
    """Base class for manifest loading failures."""


class MalformedManifestError(ManifestError):
    pass


class ManifestSchemaError(ManifestError):
    pass


class DuplicateRecordError(ManifestError):
    pass


class MissingFileError(ManifestError, FileNotFoundError):
    pass


class ImageFormatError(IrisError, ValueError):
    """Image or mask file has an unsupported channel layout or bit depth."""
