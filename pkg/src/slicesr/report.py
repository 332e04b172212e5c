"""Qualitative figure: one slice of the reference and each method, with error maps."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from slicesr.core import Volume, axis_index
from slicesr.errors import BoundsError, ShapeError


def _plane(volume: Volume, index: int, axis: str) -> np.ndarray:
    ax = axis_index(axis)
    if not 0 <= index < volume.shape[ax]:
        raise BoundsError(f"slice {index} outside [0, {volume.shape[ax]}) along {axis}")
    return np.take(volume.voxels, index, axis=ax).T


def error_map_figure(reference: Volume, tests, path, index: int | None = None, axis: str = "x",
                     vmax: float | None = None) -> Path:
    """Top row: slices; bottom row: ``|ref - method|``. ``tests`` is ``[(name, Volume), ...]``.

    The default axis is a through-plane one, where inter-slice errors are visible.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    tests = list(tests)
    if not tests:
        raise ValueError("error_map_figure needs at least one test volume")
    for name, vol in tests:
        if vol.shape != reference.shape:
            raise ShapeError(f"{name}: shape {vol.shape} differs from reference {reference.shape}")
    if index is None:
        index = reference.shape[axis_index(axis)] // 2
    ref = _plane(reference, index, axis)
    planes = [(name, _plane(vol, index, axis)) for name, vol in tests]
    errors = [np.abs(p - ref) for _, p in planes]
    vmax = float(max(e.max() for e in errors)) if vmax is None else vmax
    vmax = vmax if vmax > 0 else 1.0

    cols = len(planes) + 1
    fig, axes = plt.subplots(2, cols, figsize=(2.6 * cols, 5.4), squeeze=False)
    axes[0, 0].imshow(ref, cmap="gray", vmin=0, vmax=1, origin="lower")
    axes[0, 0].set_title("Reference")
    axes[1, 0].axis("off")
    for c, ((name, plane), err) in enumerate(zip(planes, errors), start=1):
        axes[0, c].imshow(plane, cmap="gray", vmin=0, vmax=1, origin="lower")
        axes[0, c].set_title(name)
        im = axes[1, c].imshow(err, cmap="jet", vmin=0, vmax=vmax, origin="lower")
    for a in axes[0]:
        a.set_xticks([]), a.set_yticks([])
    for a in axes[1, 1:]:
        a.set_xticks([]), a.set_yticks([])
    fig.colorbar(im, ax=list(axes[1, 1:]), fraction=0.03)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
