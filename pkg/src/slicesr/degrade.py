"""Procedures that manufacture training pairs by degrading data.

* video sub-sequence decimation (frame interpolation pre-training)
* HR -> LR simulation along z (supervised fine-tuning)
* in-plane decimation of an LR volume (self-supervised fine-tuning)
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

from slicesr.core import Frame, FrameSequence, Volume, axis_index
from slicesr.errors import NotAnisotropicWarning, ShapeError

KEPT_PER_WINDOW = 16  # a 15n+1 window keeps 16 frames
FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


def window_length(n: int) -> int:
    return 15 * n + 1


@dataclass(frozen=True, eq=False)
class SubsequenceSample:
    """A decimated video window.

    ``groundtruth`` holds ``(gap_index, offset, frame)`` so that the frame
    sits ``offset`` steps after ``kept[gap_index]``.
    """

    kept: tuple[Frame, ...]
    groundtruth: tuple[tuple[int, int, Frame], ...]
    n: int
    start: int = 0

    def reconstruct(self) -> np.ndarray:
        """Reassemble the original window as a ``(15n+1, H, W)`` array."""
        frames: list[np.ndarray | None] = [None] * ((len(self.kept) - 1) * self.n + 1)
        for j, frame in enumerate(self.kept):
            frames[j * self.n] = frame.pixels
        for i, k, frame in self.groundtruth:
            frames[i * self.n + k] = frame.pixels
        return np.stack(frames)


@dataclass(frozen=True)
class DegradeSpec:
    axis: str = "z"
    factor: int = 4
    slice_profile: str = "none"  # "none" | "gaussian"
    fwhm_mm: float | None = None  # gaussian only; None = output spacing along axis

    def __post_init__(self):
        axis_index(self.axis)
        if int(self.factor) != self.factor or self.factor < 2:
            raise ValueError(f"factor must be an integer >= 2, got {self.factor}")
        if self.slice_profile not in ("none", "gaussian"):
            raise ValueError(f"slice_profile must be 'none' or 'gaussian', got {self.slice_profile!r}")
        if self.fwhm_mm is not None and not self.fwhm_mm > 0:
            raise ValueError(f"gaussian fwhm must be positive, got {self.fwhm_mm}")


def sample_subsequence(seq: FrameSequence, n: int, rng: np.random.Generator) -> SubsequenceSample:
    length = window_length(n)
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if len(seq) < length:
        raise ValueError(
            f"sequence {seq.source_id!r} has {len(seq)} frames; n={n} needs at least {length}"
        )
    start = int(rng.integers(0, len(seq) - length + 1))
    window = seq.frames[start:start + length]
    kept = tuple(window[::n])
    groundtruth = tuple(
        (i, k, window[i * n + k]) for i in range(KEPT_PER_WINDOW - 1) for k in range(1, n)
    )
    return SubsequenceSample(kept, groundtruth, n, start)


def slice_profile_blur(voxels: np.ndarray, axis: int, fwhm_vox: float) -> np.ndarray:
    """Gaussian blur along one axis with reflective boundaries (unit-sum kernel)."""
    sigma = fwhm_vox * FWHM_TO_SIGMA
    return gaussian_filter1d(np.asarray(voxels, dtype=np.float64), sigma, axis=axis, mode="reflect")


def decimate(volume: Volume, spec: DegradeSpec) -> Volume:
    ax = axis_index(spec.axis)
    n = spec.factor
    extent = volume.shape[ax]
    if extent < n + 1:
        raise ShapeError(f"axis {spec.axis} has extent {extent}; decimating by {n} needs >= {n + 1}")
    voxels = volume.voxels
    spacing = list(volume.spacing)
    if spec.slice_profile == "gaussian":
        fwhm_mm = spec.fwhm_mm if spec.fwhm_mm is not None else n * spacing[ax]
        blurred = slice_profile_blur(voxels, ax, fwhm_mm / spacing[ax])
        voxels = np.clip(blurred, 0.0, 1.0)
    index = [slice(None)] * 3
    index[ax] = slice(None, None, n)
    spacing[ax] *= n
    return Volume(np.ascontiguousarray(voxels[tuple(index)]), tuple(spacing), volume.subject_id)


def build_selfsup_pair(
    lr: Volume,
    n: int,
    axis: str | None = "x",
    rng: np.random.Generator | None = None,
    slice_profile: str = "none",
    fwhm_mm: float | None = None,
) -> tuple[Volume, Volume]:
    """Return ``(input, reference)`` with ``input`` decimated in-plane.

    ``axis=None`` picks x or y with ``rng``. A volume that is not LR along z
    still yields a pair but raises :class:`NotAnisotropicWarning`.
    """
    if axis is None:
        if rng is None:
            raise ValueError("a generator is required when axis is None")
        axis = "x" if rng.integers(2) == 0 else "y"
    if axis not in ("x", "y"):
        raise ValueError(f"self-supervision decimates x or y, got {axis!r}")
    if not lr.is_lr_along_z:
        warnings.warn(
            f"volume {lr.subject_id!r} with spacing {lr.spacing} is not LR along z",
            NotAnisotropicWarning,
            stacklevel=2,
        )
    degraded = decimate(lr, DegradeSpec(axis, n, slice_profile, fwhm_mm))
    return degraded, lr


def random_corner(shape: Sequence[int], size: Sequence[int], rng: np.random.Generator) -> tuple[int, ...]:
    if len(size) != len(shape):
        raise ShapeError(f"patch size {tuple(size)} does not match array rank {len(shape)}")
    if any(s > e or s < 1 for s, e in zip(size, shape)):
        raise ShapeError(f"patch size {tuple(size)} exceeds extents {tuple(shape)}")
    return tuple(int(rng.integers(0, e - s + 1)) for s, e in zip(size, shape))


def crop_patch(array, size: Sequence[int], rng: np.random.Generator, corner=None):
    """Crop a uniformly placed patch from a Frame, Volume or plain array."""
    data = array.pixels if isinstance(array, Frame) else array.voxels if isinstance(array, Volume) else np.asarray(array)
    size = tuple(int(s) for s in size)
    if corner is None:
        corner = random_corner(data.shape, size, rng)
    region = tuple(slice(c, c + s) for c, s in zip(corner, size))
    patch = np.array(data[region], copy=True)
    if isinstance(array, Frame):
        return Frame(patch)
    if isinstance(array, Volume):
        return Volume(patch, array.spacing, array.subject_id)
    return patch
