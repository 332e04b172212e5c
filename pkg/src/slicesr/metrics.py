"""PSNR, SSIM, error maps and per-dataset reports."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from slicesr.core import Frame, Volume
from slicesr.errors import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _array(x) -> np.ndarray:
    if isinstance(x, Frame):
        return np.asarray(x.pixels, dtype=np.float64)
    if isinstance(x, Volume):
        return np.asarray(x.voxels, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def _pair(reference, test) -> tuple[np.ndarray, np.ndarray]:
    a, b = _array(reference), _array(test)
    if a.shape != b.shape:
        raise ShapeError(f"reference shape {a.shape} != test shape {b.shape}")
    return a, b


def joint_normalize(reference, test) -> tuple[np.ndarray, np.ndarray]:
    """Scale both arrays with the reference's min/max so the reference spans [0, 1]."""
    a, b = _pair(reference, test)
    lo, hi = a.min(), a.max()
    scale = hi - lo if hi > lo else 1.0
    return (a - lo) / scale, (b - lo) / scale


def psnr(reference, test, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a, b = _pair(reference, test)
    diff = np.abs(a - b)
    peak = float(diff.max()) if diff.size else 0.0
    if peak == 0.0:
        return math.inf
    # RMS via the peak-scaled differences: squaring d / peak instead of d keeps
    # a uniform difference exact (0.1 -> 20 dB, not 19.999999999999996)
    rms = peak * math.sqrt(float(np.mean((diff / peak) ** 2)))
    return 20.0 * math.log10(data_range / rms)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """1D unit-sum Gaussian; the 2D window is its outer product."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(image: np.ndarray, g: np.ndarray) -> np.ndarray:
    half = len(g) // 2
    out = correlate1d(image, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    return out[half:image.shape[0] - half, half:image.shape[1] - half]


def ssim_map(reference, test, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM at every position where the full window fits."""
    a, b = _pair(reference, test)
    if a.ndim != 2:
        raise ShapeError(f"ssim_map expects 2D images, got {a.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"image {a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return num / den


def ssim(reference, test, data_range: float = 1.0) -> float:
    """Mean SSIM; volumes are scored slice by slice along z and averaged."""
    a, b = _pair(reference, test)
    if a.ndim == 2:
        return float(ssim_map(a, b, data_range).mean())
    if a.ndim == 3:
        return float(np.mean([ssim_map(a[:, :, z], b[:, :, z], data_range).mean() for z in range(a.shape[2])]))
    raise ShapeError(f"ssim expects 2D or 3D data, got {a.shape}")


def error_map(reference, test) -> np.ndarray:
    a, b = _pair(reference, test)
    return np.abs(a - b)


def save_error_map_png(errors: np.ndarray, path, vmax: float | None = None, cmap: str = "jet") -> Path:
    """Render one 2D absolute-error image with a colour map."""
    from matplotlib import colormaps
    from PIL import Image

    errors = np.asarray(errors, dtype=np.float64)
    if errors.ndim != 2:
        raise ShapeError(f"error map image must be 2D, got {errors.shape}")
    vmax = float(errors.max()) if vmax is None else float(vmax)
    scaled = errors / vmax if vmax > 0 else np.zeros_like(errors)
    rgba = colormaps[cmap](np.clip(scaled, 0.0, 1.0), bytes=True)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgba[..., :3]).save(path)
    return path


def write_error_maps(reference, test, out_dir, slices: Iterable[int] | None = None,
                     prefix: str = "error", vmax: float | None = None) -> tuple[np.ndarray, list[Path]]:
    """Compute ``|ref - test|`` and write one PNG per selected z-slice (or the 2D map)."""
    errors = error_map(reference, test)
    out_dir = Path(out_dir)
    if errors.ndim == 2:
        return errors, [save_error_map_png(errors, out_dir / f"{prefix}.png", vmax)]
    if slices is None:
        slices = [errors.shape[2] // 2]
    paths = [save_error_map_png(errors[:, :, z], out_dir / f"{prefix}_z{z:03d}.png", vmax) for z in slices]
    return errors, paths


@dataclass
class SubjectMetrics:
    subject_id: str
    psnr_db: float = math.nan
    ssim: float = math.nan
    error: str = ""

    @property
    def valid(self) -> bool:
        return not self.error


@dataclass
class MetricReport:
    rows: list[SubjectMetrics] = field(default_factory=list)

    @property
    def valid_rows(self) -> list[SubjectMetrics]:
        return [r for r in self.rows if r.valid]

    def _stat(self, name: str) -> tuple[float, float]:
        values = np.array([getattr(r, name) for r in self.valid_rows], dtype=np.float64)
        if values.size == 0:
            return math.nan, math.nan
        mean = float(values.mean())
        sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
        return mean, sd

    @property
    def psnr_mean(self) -> float:
        return self._stat("psnr_db")[0]

    @property
    def psnr_sd(self) -> float:
        return self._stat("psnr_db")[1]

    @property
    def ssim_mean(self) -> float:
        return self._stat("ssim")[0]

    @property
    def ssim_sd(self) -> float:
        return self._stat("ssim")[1]

    @property
    def degenerate(self) -> bool:
        """True when fewer than two valid rows make the SD meaningless."""
        return len(self.valid_rows) < 2

    def summary(self) -> dict:
        return {
            "n": len(self.valid_rows),
            "n_failed": len(self.rows) - len(self.valid_rows),
            "psnr_mean": self.psnr_mean,
            "psnr_sd": self.psnr_sd,
            "ssim_mean": self.ssim_mean,
            "ssim_sd": self.ssim_sd,
            "degenerate_sd": self.degenerate,
        }

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["subject_id", "psnr_db", "ssim", "error"])
            for r in self.rows:
                writer.writerow([r.subject_id, _fmt_float(r.psnr_db), _fmt_float(r.ssim), r.error])
        return path

    @classmethod
    def from_csv(cls, path) -> MetricReport:
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append(SubjectMetrics(rec["subject_id"], _parse_float(rec["psnr_db"]),
                                           _parse_float(rec["ssim"]), rec.get("error", "") or ""))
        return cls(rows)

    def to_markdown(self, title: str | None = None) -> str:
        lines = [f"### {title}", ""] if title else []
        lines += ["| Subject | PSNR (dB) | SSIM |", "|---|---:|---:|"]
        for r in self.rows:
            if r.valid:
                lines.append(f"| {r.subject_id} | {r.psnr_db:.2f} | {r.ssim:.4f} |")
            else:
                lines.append(f"| {r.subject_id} | error: {r.error} | |")
        lines.append(f"| **Mean ± SD** | {self.psnr_mean:.2f} ± {self.psnr_sd:.2f} | "
                     f"{self.ssim_mean:.4f} ± {self.ssim_sd:.4f} |")
        return "\n".join(lines) + "\n"


def _fmt_float(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return ""
    return repr(float(v))


def _parse_float(s: str) -> float:
    return math.nan if s in ("", None) else float(s)


def evaluate_pair(subject_id: str, reference, test) -> SubjectMetrics:
    """PSNR/SSIM after scaling both volumes by the reference's range (peak 1)."""
    try:
        a, b = joint_normalize(reference, test)
        return SubjectMetrics(subject_id, psnr(a, b), ssim(a, b))
    except ShapeError as exc:
        return SubjectMetrics(subject_id, error=str(exc))


def evaluate_dataset(pairs: Sequence) -> MetricReport:
    """Score ``(reference, test)`` or ``(subject_id, reference, test)`` tuples."""
    if not pairs:
        raise ValueError("evaluate_dataset needs at least one pair")
    rows = []
    for i, pair in enumerate(pairs):
        if len(pair) == 3:
            sid, ref, test = pair
        else:
            ref, test = pair
            sid = getattr(ref, "subject_id", "") or f"subject_{i:03d}"
        rows.append(evaluate_pair(sid, ref, test))
    report = MetricReport(rows)
    failed = [r.subject_id for r in rows if not r.valid]
    if failed:
        warnings.warn(f"{len(failed)} subject(s) failed and were excluded from aggregates: {failed}",
                      stacklevel=2)
    return report


def table_markdown(rows: Sequence[tuple[str, MetricReport]], caption: str | None = None) -> str:
    """Method | PSNR Mean/SD | SSIM Mean/SD table."""
    lines = [f"**{caption}**", ""] if caption else []
    lines += ["| Method | PSNR Mean | PSNR SD | SSIM Mean | SSIM SD |", "|---|---:|---:|---:|---:|"]
    best_psnr = max((r.psnr_mean for _, r in rows), default=math.nan)
    best_ssim = max((r.ssim_mean for _, r in rows), default=math.nan)
    for name, r in rows:
        p = f"{r.psnr_mean:.2f}"
        s = f"{r.ssim_mean:.4f}"
        if r.psnr_mean == best_psnr and len(rows) > 1:
            p = f"**{p}**"
        if r.ssim_mean == best_ssim and len(rows) > 1:
            s = f"**{s}**"
        lines.append(f"| {name} | {p} | {r.psnr_sd:.2f} | {s} | {r.ssim_sd:.4f} |")
    return "\n".join(lines) + "\n"


def ablation_markdown(rows: Sequence[tuple[dict, MetricReport]], caption: str | None = None) -> str:
    """VP | SF | SSF check-mark table; each row's flags come from its run lineage."""
    lines = [f"**{caption}**", ""] if caption else []
    lines += ["| VP | SF | SSF | PSNR Mean | PSNR SD | SSIM Mean | SSIM SD |",
              "|:-:|:-:|:-:|---:|---:|---:|---:|"]
    mark = lambda flag: "✓" if flag else ""  # noqa: E731
    for flags, r in rows:
        lines.append(f"| {mark(flags.get('VP'))} | {mark(flags.get('SF'))} | {mark(flags.get('SSF'))} | "
                     f"{r.psnr_mean:.2f} | {r.psnr_sd:.2f} | {r.ssim_mean:.4f} | {r.ssim_sd:.4f} |")
    return "\n".join(lines) + "\n"
