"""Assemble an isotropic volume from an LR stack, plus the linear baseline.

Acquired slices are copied verbatim; only the positions between them are
predicted. The output grid spans exactly the input z-range.
"""

from __future__ import annotations

import logging
import math
import time
from typing import Sequence

import numpy as np

from slicesr.core import Volume
from slicesr.errors import ShapeError
from slicesr.model import ModelParams, SliceInterpolator

log = logging.getLogger(__name__)

DEFAULT_TILE = 256
DEFAULT_OVERLAP = 16
DEFAULT_HALO = 48
_SNAP = 1e-9


def _check_lr(lr: Volume, n: int | None = None) -> None:
    if lr.shape[2] < 2:
        raise ShapeError(f"need at least 2 slices along z, got {lr.shape[2]}")
    if n is not None and (int(n) != n or n < 2):
        raise ValueError(f"factor must be an integer >= 2, got {n}")
    if not lr.is_lr_along_z:
        log.warning("volume %r with spacing %s is not LR along z", lr.subject_id, lr.spacing)


def grid_positions(z_extent: int, spacing_z: float, target_spacing: float) -> list[tuple[int, float]]:
    """Bracketing ``(slice_index, t)`` for every output slice at ``target_spacing``.

    ``t == 0`` marks a position that coincides with an acquired slice.
    """
    if not 0 < target_spacing <= spacing_z:
        raise ValueError(f"target spacing must lie in (0, {spacing_z}], got {target_spacing}")
    span = (z_extent - 1) * spacing_z
    count = int(math.floor(span / target_spacing + _SNAP)) + 1
    positions = []
    for m in range(count):
        u = m * target_spacing / spacing_z
        j = int(math.floor(u + _SNAP))
        t = u - j
        if abs(t) < _SNAP:
            t = 0.0
        if j >= z_extent - 1:
            j, t = z_extent - 1, 0.0
        positions.append((j, t))
    return positions


def _tile_starts(extent: int, tile: int, step: int, align: int) -> list[int]:
    if extent <= tile:
        return [0]
    starts = list(range(0, extent - tile, step))
    last = (extent - tile) // align * align
    if last > starts[-1]:
        starts.append(last)
    return starts


def _ramp(length: int, overlap: int, at_start: bool, at_end: bool) -> np.ndarray:
    w = np.ones(length, dtype=np.float64)
    ramp = (np.arange(overlap, dtype=np.float64) + 1.0) / (overlap + 1.0)
    if overlap and not at_start:
        w[:overlap] = ramp
    if overlap and not at_end:
        w[-overlap:] = ramp[::-1]
    return w


def _round_up(value: int, align: int) -> int:
    return -(-value // align) * align


def predict_between(model: SliceInterpolator, left: np.ndarray, right: np.ndarray, ts: Sequence[float],
                    tile: int | None = DEFAULT_TILE, overlap: int = DEFAULT_OVERLAP,
                    halo: int = DEFAULT_HALO) -> np.ndarray:
    """Predict ``len(ts)`` planes between two 2D arrays, tiling large planes.

    Each tile is run with ``halo`` pixels of extra context on every side and
    only its interior is kept; overlapping interiors are blended with linear
    ramps that sum to one. Tile origins sit on the encoder's stride grid so
    that interior features match an untiled pass.
    """
    h, w = left.shape
    if tile is None or (h <= tile and w <= tile):
        return model.interpolate_many(left, right, ts)
    align = 2 ** (len(model.config.encoder_channels) - 1)
    tile = _round_up(max(tile, 2 * align), align)
    overlap = min(_round_up(overlap, align), tile - align)
    halo = _round_up(halo, align)
    acc = np.zeros((len(ts), h, w), dtype=np.float64)
    weight = np.zeros((h, w), dtype=np.float64)
    ys = _tile_starts(h, tile, tile - overlap, align)
    xs = _tile_starts(w, tile, tile - overlap, align)
    for y0 in ys:
        y1 = h if y0 == ys[-1] else min(y0 + tile, h)
        wy = _ramp(y1 - y0, overlap, y0 == ys[0], y0 == ys[-1])
        cy0, cy1 = max(0, y0 - halo), min(h, y1 + halo)
        for x0 in xs:
            x1 = w if x0 == xs[-1] else min(x0 + tile, w)
            wx = _ramp(x1 - x0, overlap, x0 == xs[0], x0 == xs[-1])
            cx0, cx1 = max(0, x0 - halo), min(w, x1 + halo)
            context = (slice(cy0, cy1), slice(cx0, cx1))
            pred = model.interpolate_many(left[context], right[context], ts)
            pred = pred[:, y0 - cy0:y1 - cy0, x0 - cx0:x1 - cx0]
            wt = wy[:, None] * wx[None, :]
            acc[:, y0:y1, x0:x1] += pred * wt
            weight[y0:y1, x0:x1] += wt
    return acc / weight


def _assemble(lr: Volume, positions, predict, spacing_z: float) -> Volume:
    X, Y, Z = lr.shape
    src = lr.voxels
    out = np.empty((X, Y, len(positions)), dtype=np.float32)
    by_gap: dict[int, list[tuple[int, float]]] = {}
    for m, (j, t) in enumerate(positions):
        if t == 0.0:
            out[:, :, m] = src[:, :, j]
        else:
            by_gap.setdefault(j, []).append((m, t))
    for j, items in by_gap.items():
        pred = predict(src[:, :, j], src[:, :, j + 1], [t for _, t in items])
        for (m, _), plane in zip(items, pred):
            out[:, :, m] = np.clip(plane, 0.0, 1.0)
    sx, sy, _ = lr.spacing
    return Volume(out, (sx, sy, spacing_z), lr.subject_id)


def _model_from(params) -> SliceInterpolator:
    model = params.build() if isinstance(params, ModelParams) else params
    model.eval()
    return model


def _predictor(params, tile, overlap):
    model = _model_from(params)
    return lambda a, b, ts: predict_between(model, a, b, ts, tile, overlap)


def super_resolve(lr: Volume, params, factor: int, tile: int | None = DEFAULT_TILE,
                  overlap: int = DEFAULT_OVERLAP) -> Volume:
    """Insert ``factor - 1`` predicted slices into every gap along z."""
    _check_lr(lr, factor)
    start = time.perf_counter()
    Z = lr.shape[2]
    positions = [(j, k / factor) if k else (j, 0.0) for j in range(Z - 1) for k in range(factor)]
    positions.append((Z - 1, 0.0))
    out = _assemble(lr, positions, _predictor(params, tile, overlap), lr.spacing[2] / factor)
    log.info("super_resolve %s: %d -> %d slices in %.2fs", lr.subject_id, Z, out.shape[2],
             time.perf_counter() - start)
    return out


def super_resolve_continuous(lr: Volume, params, target_spacing: float, tile: int | None = DEFAULT_TILE,
                             overlap: int = DEFAULT_OVERLAP) -> Volume:
    """Resample z onto a uniform grid at ``target_spacing`` mm."""
    _check_lr(lr)
    sz = lr.spacing[2]
    if target_spacing > sz:
        raise ValueError(f"target spacing {target_spacing} exceeds input slice spacing {sz}; coarsening is not supported")
    positions = grid_positions(lr.shape[2], sz, target_spacing)
    return _assemble(lr, positions, _predictor(params, tile, overlap), float(target_spacing))


def _linear(a: np.ndarray, b: np.ndarray, ts) -> np.ndarray:
    return np.stack([(1.0 - t) * a.astype(np.float64) + t * b.astype(np.float64) for t in ts])


def trilinear_upsample(lr: Volume, factor: int) -> Volume:
    """Linear interpolation along z on the same grid as :func:`super_resolve`."""
    _check_lr(lr, factor)
    Z = lr.shape[2]
    positions = [(j, k / factor) if k else (j, 0.0) for j in range(Z - 1) for k in range(factor)]
    positions.append((Z - 1, 0.0))
    return _assemble(lr, positions, _linear, lr.spacing[2] / factor)


def trilinear_continuous(lr: Volume, target_spacing: float) -> Volume:
    _check_lr(lr)
    positions = grid_positions(lr.shape[2], lr.spacing[2], target_spacing)
    return _assemble(lr, positions, _linear, float(target_spacing))


def hr_reference_grid(hr: Volume, factor: int) -> Volume:
    """Crop an HR volume to the z-range covered by its ``factor``-decimated stack."""
    Z = hr.shape[2]
    z_lr = (Z - 1) // factor + 1
    return hr.replace(voxels=hr.voxels[:, :, : (z_lr - 1) * factor + 1])
