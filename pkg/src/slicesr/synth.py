"""Synthetic videos and phantom volumes with closed-form ground truth.

Phantom fields are defined on continuous voxel coordinates, so the true
value between two slices is available for any fractional ``z``. Content is
smooth along ``z``: periods along z stay above 16 voxels, below half the
Nyquist rate of a 4x decimated grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from slicesr.core import FrameSequence, Volume

VIDEO_KINDS = ("translating_gradient", "moving_blob", "rotating_bars")
PHANTOM_KINDS = ("sphere_shells", "sinusoid_z", "layered_tissue")

MIN_Z_PERIOD = 20.0


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def make_video(kind: str, frames: int, size: tuple[int, int] = (64, 64), seed: int = 0) -> FrameSequence:
    """Deterministic grayscale sequence with smooth inter-frame motion."""
    rng = np.random.default_rng(seed)
    h, w = size
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    out = np.empty((frames, h, w), dtype=np.float64)

    if kind == "translating_gradient":
        comps = []
        for _ in range(4):
            theta = rng.uniform(0, 2 * np.pi)
            freq = rng.uniform(1 / 48, 1 / 20)
            comps.append((np.cos(theta) * freq, np.sin(theta) * freq, rng.uniform(0, 2 * np.pi), rng.uniform(0.5, 1.0)))
        vel = rng.uniform(-0.6, 0.6, size=2)
        total = sum(c[3] for c in comps)
        for f in range(frames):
            x, y = xx - vel[0] * f, yy - vel[1] * f
            acc = sum(a * np.sin(2 * np.pi * (fx * x + fy * y) + ph) for fx, fy, ph, a in comps)
            out[f] = 0.5 + 0.5 * acc / total
    elif kind == "moving_blob":
        count = int(rng.integers(3, 6))
        centers = rng.uniform(0.2, 0.8, size=(count, 2)) * (h, w)
        amps = rng.uniform(4, 12, size=(count, 2))
        omegas = rng.uniform(0.02, 0.06, size=(count, 2)) * rng.choice([-1, 1], size=(count, 2))
        phases = rng.uniform(0, 2 * np.pi, size=(count, 2))
        sigmas = rng.uniform(3, 7, size=count)
        weights = rng.uniform(0.8, 2.0, size=count)
        for f in range(frames):
            acc = np.zeros((h, w))
            for b in range(count):
                cy, cx = centers[b] + amps[b] * np.sin(omegas[b] * f + phases[b])
                acc += weights[b] * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigmas[b] ** 2))
            out[f] = 0.05 + 0.9 * (1.0 - np.exp(-acc))
    elif kind == "rotating_bars":
        freq = rng.uniform(1 / 16, 1 / 8)
        theta0 = rng.uniform(0, np.pi)
        omega = rng.uniform(0.004, 0.01) * rng.choice([-1, 1])
        cy, cx = (h - 1) / 2, (w - 1) / 2
        for f in range(frames):
            th = theta0 + omega * f
            proj = (xx - cx) * np.cos(th) + (yy - cy) * np.sin(th)
            out[f] = 0.5 + 0.4 * np.cos(2 * np.pi * freq * proj)
    else:
        raise ValueError(f"unknown video kind {kind!r}; choose from {VIDEO_KINDS}")
    return FrameSequence.from_array(np.clip(out, 0.0, 1.0), source_id=f"{kind}-{seed}")


@dataclass(frozen=True)
class PhantomField:
    """A continuous intensity field over voxel coordinates ``(x, y, z)``."""

    kind: str
    size: tuple[int, int, int]
    seed: int

    def __post_init__(self):
        if self.kind not in PHANTOM_KINDS:
            raise ValueError(f"unknown phantom kind {self.kind!r}; choose from {PHANTOM_KINDS}")

    def _rng(self):
        return np.random.default_rng([self.seed, PHANTOM_KINDS.index(self.kind)])

    def evaluate(self, x, y, z) -> np.ndarray:
        x, y, z = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (x, y, z)))
        rng = self._rng()
        X, Y, Z = self.size
        if self.kind == "sinusoid_z":
            acc = np.zeros(x.shape)
            total = 0.0
            for _ in range(10):
                # isotropic direction; |f| <= 1/MIN_Z_PERIOD keeps z band-limited
                direction = rng.normal(size=3)
                direction /= np.linalg.norm(direction)
                fx, fy, fz = rng.uniform(1 / 24, 1 / MIN_Z_PERIOD) * direction
                ph = rng.uniform(0, 2 * np.pi)
                a = rng.uniform(0.5, 1.0)
                acc += a * np.sin(2 * np.pi * (fx * x + fy * y + fz * z) + ph)
                total += a
            return 0.5 + 0.45 * acc / total
        if self.kind == "layered_tissue":
            layers = int(rng.integers(4, 7))
            levels = rng.uniform(0.1, 0.9, size=layers + 1)
            base = np.sort(rng.uniform(0.1, 0.9, size=layers)) * Y
            value = np.full(x.shape, levels[0])
            for i in range(layers):
                # x and z undulations share one distribution
                fx, fz = rng.uniform(1 / 64, 1 / MIN_Z_PERIOD, size=2)
                ax, az = rng.uniform(2.0, 6.0, size=2)
                ph = rng.uniform(0, 2 * np.pi, size=2)
                tx, tz = rng.uniform(-0.3, 0.3, size=2)
                boundary = (base[i] + ax * np.sin(2 * np.pi * fx * x + ph[0]) + az * np.sin(2 * np.pi * fz * z + ph[1])
                            + tx * (x - X / 2) + tz * (z - Z / 2))
                value = value + (levels[i + 1] - levels[i]) * _sigmoid((y - boundary) / 1.2)
            return value
        # sphere_shells
        count = int(rng.integers(2, 4))
        value = np.full(x.shape, 0.2)
        ceiling = 0.2
        for _ in range(count):
            c = rng.uniform(0.25, 0.75, size=3) * (X, Y, Z)
            radius = rng.uniform(0.2, 0.45) * min(X, Y)
            width = rng.uniform(1.5, 3.0)
            level = rng.uniform(0.2, 0.6)
            ceiling += level
            r = np.sqrt((x - c[0]) ** 2 + (y - c[1]) ** 2 + ((z - c[2]) * 0.5) ** 2)
            value = value + level * _sigmoid((radius - r) / width) * (0.6 + 0.4 * np.cos(r / 3.0))
        return value / ceiling

    def sample(self, z_positions=None) -> np.ndarray:
        """Field on the integer (x, y) grid at the given (possibly fractional) z positions."""
        X, Y, Z = self.size
        z = np.arange(Z, dtype=np.float64) if z_positions is None else np.asarray(z_positions, dtype=np.float64)
        gx, gy, gz = np.meshgrid(np.arange(X, dtype=np.float64), np.arange(Y, dtype=np.float64), z, indexing="ij")
        return np.clip(self.evaluate(gx, gy, gz), 0.0, 1.0)


def make_phantom_volume(kind: str, size=(64, 64, 64), spacing=(1.0, 1.0, 1.0), seed: int = 0) -> Volume:
    field = PhantomField(kind, tuple(int(s) for s in size), int(seed))
    return Volume(field.sample(), tuple(spacing), f"{kind}-{seed}")


def invert_contrast(volume: Volume) -> Volume:
    """``1 - v``; used to emulate a modality shift between datasets."""
    return volume.replace(voxels=1.0 - volume.voxels)
