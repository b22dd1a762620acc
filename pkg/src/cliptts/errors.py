"""Exception types raised across the package."""


class ClipTTSError(Exception):
    """Base class for all package errors."""


class ShapeError(ClipTTSError, ValueError):
    pass


class InvalidShape(ShapeError):
    pass


class InvalidKernel(ClipTTSError, ValueError):
    pass


class InvalidRate(ClipTTSError, ValueError):
    pass


class InvalidStep(ClipTTSError, ValueError):
    pass


class InvalidDim(ClipTTSError, ValueError):
    pass


class TapeError(ClipTTSError, RuntimeError):
    """backward() called on something that was not recorded on a live tape."""


class EmptyPool(ClipTTSError, ValueError):
    pass


class NonFiniteGradient(ClipTTSError, FloatingPointError):
    pass


class MaskError(ClipTTSError, ValueError):
    pass


class EmptyExpansion(ClipTTSError, ValueError):
    pass


class ContractError(ClipTTSError, ValueError):
    pass


class DegenerateBatchWarning(UserWarning):
    """Contrastive loss evaluated on a batch with fewer than two items."""


# audio
class UnsupportedFormat(ClipTTSError, ValueError):
    pass


class EmptyAudio(ClipTTSError, ValueError):
    pass


class InputTooShort(ClipTTSError, ValueError):
    pass


class InvalidRange(ClipTTSError, ValueError):
    pass


class SampleRateMismatch(ClipTTSError, ValueError):
    pass


# text
class InventoryError(ClipTTSError, ValueError):
    pass


class EmptyText(ClipTTSError, ValueError):
    pass


# data
class ManifestError(ClipTTSError, ValueError):
    pass


class TooShort(ClipTTSError, ValueError):
    pass


class DurationMismatch(ClipTTSError, ValueError):
    """Sum of phoneme durations differs from the mel frame count."""


# persistence / config
class CheckpointFormatError(ClipTTSError, ValueError):
    pass


class CheckpointMismatch(ClipTTSError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ConfigError(ClipTTSError, ValueError):
    pass
