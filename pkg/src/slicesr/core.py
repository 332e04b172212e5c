"""Data model for frames, volumes and interpolation targets, plus disk I/O.

Volumes are indexed ``(x, y, z)`` with ``z`` the slice-stacking axis. All
intensities handled by the package live in ``[0, 1]``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from slicesr.errors import BoundsError, FormatError, ShapeError

AXES = {"x": 0, "y": 1, "z": 2}

# BT.601 luma
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

RAW_SUFFIX = ".raw"
NIFTI_SUFFIXES = (".nii", ".nii.gz")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def axis_index(axis: str | int) -> int:
    if isinstance(axis, (int, np.integer)):
        if not 0 <= int(axis) <= 2:
            raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
        return int(axis)
    try:
        return AXES[axis]
    except KeyError:
        raise ValueError(f"axis must be one of x, y, z, got {axis!r}") from None


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float32, copy=True)
    array.setflags(write=False)
    return array


def _check_unit_range(array: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{what} contains non-finite values")
    if array.size and (array.min() < 0.0 or array.max() > 1.0):
        raise ValueError(
            f"{what} intensities must lie in [0, 1], got [{array.min()}, {array.max()}]"
        )


@dataclass(frozen=True, eq=False)
class Frame:
    """A 2D grayscale image with intensities in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        pixels = _frozen(self.pixels)
        if pixels.ndim != 2 or min(pixels.shape) < 1:
            raise ShapeError(f"Frame needs a non-empty 2D array, got shape {pixels.shape}")
        _check_unit_range(pixels, "Frame")
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True, eq=False)
class FrameSequence:
    frames: tuple[Frame, ...]
    source_id: str = ""

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) < 2:
            raise ValueError(f"a FrameSequence needs at least 2 frames, got {len(frames)}")
        shapes = {f.shape for f in frames}
        if len(shapes) != 1:
            raise ShapeError(f"all frames must share one shape, got {sorted(shapes)}")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, index):
        return self.frames[index]

    @property
    def frame_shape(self) -> tuple[int, int]:
        return self.frames[0].shape

    def as_array(self) -> np.ndarray:
        """Frames stacked into a ``(T, H, W)`` array."""
        return np.stack([f.pixels for f in self.frames])

    @classmethod
    def from_array(cls, array: np.ndarray, source_id: str = "") -> FrameSequence:
        return cls(tuple(Frame(a) for a in np.asarray(array)), source_id)


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar grid indexed ``(x, y, z)`` with spacing in millimetres."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    subject_id: str = ""

    def __post_init__(self):
        voxels = _frozen(self.voxels)
        if voxels.ndim != 3 or min(voxels.shape) < 1:
            raise ShapeError(f"Volume needs a non-empty 3D array, got shape {voxels.shape}")
        _check_unit_range(voxels, "Volume")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        object.__setattr__(self, "voxels", voxels)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def is_lr_along_z(self) -> bool:
        sx, sy, sz = self.spacing
        return sz > sx and sz > sy

    def replace(self, voxels=None, spacing=None, subject_id=None) -> Volume:
        return Volume(
            self.voxels if voxels is None else voxels,
            self.spacing if spacing is None else spacing,
            self.subject_id if subject_id is None else subject_id,
        )


@dataclass(frozen=True)
class TargetCoordinate:
    """Position of an intermediate slice, ``k`` steps into a gap of ``n``.

    The network only consumes the normalised offset ``t = k / n``.
    """

    k: float
    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"n must be an integer >= 2, got {self.n}")
        if not 0 <= self.k <= self.n:
            raise ValueError(f"k must lie in [0, n={self.n}], got {self.k}")

    @property
    def t(self) -> float:
        return self.k / self.n

    @classmethod
    def from_fraction(cls, t: float, n: int = 2) -> TargetCoordinate:
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {t}")
        return cls(t * n, n)


@dataclass(frozen=True, eq=False)
class InterpolationSample:
    left: Frame
    right: Frame
    coord: TargetCoordinate
    target: Frame | None = field(default=None)

    def __post_init__(self):
        shapes = {self.left.shape, self.right.shape}
        if self.target is not None:
            shapes.add(self.target.shape)
        if len(shapes) != 1:
            raise ShapeError(f"sample frames disagree in shape: {sorted(shapes)}")


def normalize_intensities(raw) -> np.ndarray:
    """Min-max scale to [0, 1]; constant input maps to zeros."""
    array = np.asarray(raw, dtype=np.float64)
    if array.size == 0:
        raise ValueError("cannot normalize an empty array")
    if not np.all(np.isfinite(array)):
        bad = int(np.count_nonzero(~np.isfinite(array)))
        raise ValueError(f"cannot normalize: {bad} non-finite value(s)")
    lo, hi = array.min(), array.max()
    if hi == lo:
        return np.zeros(array.shape, dtype=np.float32)
    return ((array - lo) / (hi - lo)).astype(np.float32)


def _prepare_intensities(array: np.ndarray, normalize: bool | str) -> np.ndarray:
    # "auto" leaves data that already lies in [0, 1] untouched so that files
    # written by save_volume round-trip bit-exactly.
    if normalize == "auto":
        finite = np.all(np.isfinite(array))
        if finite and array.min() >= 0.0 and array.max() <= 1.0:
            return array.astype(np.float32)
        return normalize_intensities(array)
    if normalize:
        return normalize_intensities(array)
    return array.astype(np.float32)


def _volume_format(path: Path) -> str:
    name = path.name.lower()
    if name.endswith(NIFTI_SUFFIXES):
        return "nifti"
    if name.endswith(RAW_SUFFIX):
        return "raw"
    raise FormatError(f"unrecognised volume format for {path} (expected .nii, .nii.gz or .raw)")


def _read_raw(path: Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
        shape = tuple(int(s) for s in header["shape"])
        spacing = tuple(float(s) for s in header["spacing"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed raw header ({exc})") from exc
    if len(shape) != 3:
        raise ShapeError(f"{path}: raw payload must be 3D, header says shape {list(shape)}")
    expected = 4 * int(np.prod(shape))
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return data.astype(np.float32), spacing


def _write_raw(path: Path, voxels: np.ndarray, spacing) -> None:
    header = {"shape": list(voxels.shape), "spacing": [float(s) for s in spacing]}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(voxels, dtype="<f4").tobytes())


def _read_nifti(path: Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    import nibabel as nib

    try:
        image = nib.load(str(path))
        data = np.asarray(image.get_fdata(dtype=np.float32))
        zooms = image.header.get_zooms()
    except Exception as exc:  # nibabel raises a zoo of exception types
        raise FormatError(f"{path}: cannot read NIfTI ({exc})") from exc
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise ShapeError(f"{path}: expected a 3D NIfTI payload, got shape {data.shape}")
    return data, tuple(float(z) for z in zooms[:3])


def _write_nifti(path: Path, voxels: np.ndarray, spacing) -> None:
    import nibabel as nib

    affine = np.diag([*map(float, spacing), 1.0])
    image = nib.Nifti1Image(np.asarray(voxels, dtype=np.float32), affine)
    image.header.set_zooms(tuple(float(s) for s in spacing))
    nib.save(image, str(path))


def load_volume(path, normalize: bool | str = "auto", subject_id: str | None = None) -> Volume:
    """Read a NIfTI-1 or raw volume.

    ``normalize="auto"`` min-max scales only data outside [0, 1]; ``True``
    always rescales; ``False`` never does (values must already be in range).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    reader = _read_nifti if _volume_format(path) == "nifti" else _read_raw
    data, spacing = reader(path)
    if subject_id is None:
        subject_id = volume_stem(path)
    return Volume(_prepare_intensities(data, normalize), spacing, subject_id)


def save_volume(volume: Volume, path) -> Path:
    path = Path(path)
    writer = _write_nifti if _volume_format(path) == "nifti" else _write_raw
    path.parent.mkdir(parents=True, exist_ok=True)
    writer(path, volume.voxels, volume.spacing)
    return path


def volume_stem(path) -> str:
    name = Path(path).name
    for suffix in (*NIFTI_SUFFIXES, RAW_SUFFIX):
        if name.lower().endswith(suffix):
            return name[: -len(suffix)]
    return Path(path).stem


def list_volumes(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(directory)
    return sorted(
        p for p in directory.iterdir()
        if p.is_file() and p.name.lower().endswith((*NIFTI_SUFFIXES, RAW_SUFFIX))
    )


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = LUMA_WEIGHTS
    return r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2]


def _read_gray_image(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        if img.mode in ("L", "I", "I;16", "F"):
            return np.asarray(img, dtype=np.float64)
        return to_grayscale(np.asarray(img.convert("RGB"), dtype=np.float64))


def _resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    from PIL import Image

    h, w = size
    if image.shape == (h, w):
        return image
    resized = Image.fromarray(image.astype(np.float32), mode="F").resize((w, h), Image.BILINEAR)
    return np.asarray(resized, dtype=np.float64)


def load_frame_sequence(directory, resize_to: tuple[int, int] | None = (90, 160)) -> FrameSequence:
    """Load a directory of images as one grayscale sequence.

    Files are ordered lexicographically. Every frame is resized to
    ``resize_to`` (height, width) and the whole sequence is min-max
    normalised jointly.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no image files in {directory}")
    if len(files) < 2:
        raise ValueError(f"{directory}: a frame sequence needs at least 2 frames, found 1")
    images = [_read_gray_image(p) for p in files]
    if resize_to is not None:
        images = [_resize_bilinear(img, tuple(resize_to)) for img in images]
    stack = normalize_intensities(np.stack(images))
    return FrameSequence.from_array(stack, source_id=directory.name)


def save_frame_sequence(seq: FrameSequence, directory) -> Path:
    """Write frames as 8-bit grayscale PNGs named in temporal order."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(seq))))
    for i, frame in enumerate(seq.frames):
        img = np.round(frame.pixels * 255.0).astype(np.uint8)
        Image.fromarray(img, mode="L").save(directory / f"{i:0{width}d}.png")
    return directory


def extract_slice(volume: Volume, axis: str | int, index: int) -> Frame:
    ax = axis_index(axis)
    extent = volume.shape[ax]
    if not 0 <= index < extent:
        raise BoundsError(f"slice index {index} out of range for axis {axis} with extent {extent}")
    return Frame(np.take(volume.voxels, index, axis=ax))


def list_frame_dirs(root) -> list[Path]:
    """Every directory under ``root`` (inclusive) that directly holds image files."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(root)
    found = [d for d in (root, *root.rglob("*")) if d.is_dir()
             and any(p.suffix.lower() in IMAGE_SUFFIXES for p in d.iterdir() if p.is_file())]
    return sorted(found)


def resolve_data_path(path, root: str | os.PathLike | None = None) -> Path:
    """Resolve relative paths against ``root`` or ``$SLICESR_DATA_ROOT``."""
    path = Path(path)
    if path.is_absolute():
        return path
    root = root if root is not None else os.environ.get("SLICESR_DATA_ROOT")
    return Path(root) / path if root else path


def stack_frames(frames: Sequence[Frame]) -> np.ndarray:
    return np.stack([f.pixels for f in frames])
