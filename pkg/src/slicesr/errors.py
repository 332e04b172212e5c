class SliceSRError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(SliceSRError, ValueError):
    """A file or archive could not be parsed."""


class ShapeError(SliceSRError, ValueError):
    """Array dimensions violate an operation's contract."""


class BoundsError(SliceSRError, IndexError):
    """An index lies outside the valid range of an axis."""


class CompatibilityError(SliceSRError):
    """A parameter archive does not match the requested model configuration."""


class StageMismatchError(SliceSRError):
    """A checkpoint comes from the wrong training stage."""


class TrainingDivergedError(SliceSRError, FloatingPointError):
    """The training loss became non-finite."""


class NotAnisotropicWarning(UserWarning):
    """A volume expected to be LR along z is not."""
