"""Inter-slice super-resolution for anisotropic MR volumes.

Three training stages share one coordinate-conditioned interpolation network:
video frame interpolation pre-training, supervised fine-tuning on HR volumes
and per-subject self-supervised fine-tuning on the LR volume itself.
"""

from slicesr.core import (
    Frame,
    FrameSequence,
    InterpolationSample,
    TargetCoordinate,
    Volume,
    extract_slice,
    load_frame_sequence,
    load_volume,
    normalize_intensities,
    save_volume,
)
from slicesr.errors import (
    BoundsError,
    CompatibilityError,
    FormatError,
    ShapeError,
    SliceSRError,
    StageMismatchError,
    TrainingDivergedError,
)

__version__ = "0.1.0"

__all__ = [
    "BoundsError",
    "CompatibilityError",
    "FormatError",
    "Frame",
    "FrameSequence",
    "InterpolationSample",
    "ShapeError",
    "SliceSRError",
    "StageMismatchError",
    "TargetCoordinate",
    "TrainingDivergedError",
    "Volume",
    "extract_slice",
    "load_frame_sequence",
    "load_volume",
    "normalize_intensities",
    "save_volume",
]
