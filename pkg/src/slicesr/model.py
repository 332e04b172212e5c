"""Coordinate-conditioned slice interpolation network.

A shared convolutional encoder turns each bounding frame into per-pixel
features. A per-pixel decoder reads both feature maps plus a sinusoidal
encoding of the offset ``t`` and predicts a residual that is added to the
linear blend ``(1 - t) * left + t * right``. The decoder's last layer starts
at zero, so an untrained network is exactly linear interpolation.

Parameter archive layout (all integers little-endian)::

    8 bytes   magic b"SLSRPRM1"
    8 bytes   uint64 header length L
    L bytes   UTF-8 JSON header: config, fingerprint, stage, step, lineage,
              tensors = [{name, dtype, shape, offset, nbytes}, ...]
    ...       concatenated tensor payloads, offsets relative to payload start
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from slicesr.core import Frame, InterpolationSample, TargetCoordinate
from slicesr.errors import CompatibilityError, FormatError, ShapeError

ARCHIVE_MAGIC = b"SLSRPRM1"
ARCHIVE_VERSION = 1
STAGE_TAGS = ("init", "video-pretrain", "mr-finetune", "selfsup")


@dataclass(frozen=True)
class ModelConfig:
    encoder_channels: tuple[int, ...] = (48, 96, 192)
    blocks_per_stage: int = 2
    feature_dim: int = 64
    coord_frequencies: int = 6
    decoder_widths: tuple[int, ...] = (128, 128, 1)
    target_params: int = 2_100_000
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "decoder_widths", tuple(int(c) for c in self.decoder_widths))
        if not self.encoder_channels or min(self.encoder_channels) < 1:
            raise ValueError("encoder_channels must be a non-empty list of positive counts")
        if not self.decoder_widths or self.decoder_widths[-1] != 1:
            raise ValueError("decoder_widths must end with a single output channel")
        if self.feature_dim < 1 or self.coord_frequencies < 0 or self.blocks_per_stage < 0:
            raise ValueError("feature_dim >= 1, coord_frequencies >= 0, blocks_per_stage >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["decoder_widths"] = list(self.decoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)

    def fingerprint(self) -> str:
        # target_params is a budget, not architecture
        arch = {k: v for k, v in self.to_dict().items() if k != "target_params"}
        blob = json.dumps(arch, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def encode_offset(t: torch.Tensor, frequencies: int) -> torch.Tensor:
    """Map ``t`` of shape (B,) to (B, 1 + 2 * frequencies)."""
    t = t.reshape(-1, 1)
    if frequencies == 0:
        return t
    bands = (2.0 ** torch.arange(frequencies, dtype=t.dtype, device=t.device)) * math.pi
    angles = t * bands
    return torch.cat([t, torch.sin(angles), torch.cos(angles)], dim=1)


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode="replicate")


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = _conv(channels, channels)
        self.conv2 = _conv(channels, channels)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(x)))


class FrameEncoder(nn.Module):
    """Multi-scale encoder that returns full-resolution per-pixel features."""

    def __init__(self, channels: Sequence[int], blocks: int, feature_dim: int):
        super().__init__()
        self.stages = nn.ModuleList()
        cin = 1
        for i, cout in enumerate(channels):
            layers = [_conv(cin, cout, stride=1 if i == 0 else 2)]
            layers += [ResidualBlock(cout) for _ in range(blocks)]
            self.stages.append(nn.Sequential(*layers))
            cin = cout
        self.fuse = nn.Conv2d(sum(channels), feature_dim, 1)

    def forward(self, x):
        size = x.shape[-2:]
        outputs = []
        h = x
        for i, stage in enumerate(self.stages):
            h = stage(h if i == 0 else F.silu(h))
            up = h if h.shape[-2:] == size else F.interpolate(h, size=size, mode="bilinear", align_corners=False)
            outputs.append(up)
        return self.fuse(F.silu(torch.cat(outputs, dim=1)))


class SliceInterpolator(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        self.encoder = FrameEncoder(cfg.encoder_channels, cfg.blocks_per_stage, cfg.feature_dim)
        widths = [2 * cfg.feature_dim + 1 + 2 * cfg.coord_frequencies, *cfg.decoder_widths]
        self.decoder = nn.ModuleList(nn.Conv2d(a, b, 1) for a, b in zip(widths[:-1], widths[1:]))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        gen = torch.Generator().manual_seed(self.config.init_seed)
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.weight[0].numel()
                bound = math.sqrt(3.0 / fan_in)
                with torch.no_grad():
                    module.weight.uniform_(-bound, bound, generator=gen)
                    module.bias.zero_()
        with torch.no_grad():
            self.decoder[-1].weight.zero_()
            self.decoder[-1].bias.zero_()

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        return self.encoder(frames)

    def decode(self, feat_left, feat_right, left, right, t) -> torch.Tensor:
        t = t.to(left.dtype).reshape(-1)
        gamma = encode_offset(t, self.config.coord_frequencies)
        gamma = gamma[:, :, None, None].expand(-1, -1, *left.shape[-2:])
        h = torch.cat([feat_left, feat_right, gamma], dim=1)
        for i, layer in enumerate(self.decoder):
            h = layer(h)
            if i < len(self.decoder) - 1:
                h = F.silu(h)
        tt = t[:, None, None, None]
        return (1 - tt) * left + tt * right + h

    def forward(self, left: torch.Tensor, right: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """``left``/``right``: (B, 1, H, W); ``t``: (B,). Returns (B, 1, H, W)."""
        if left.shape != right.shape:
            raise ShapeError(f"left {tuple(left.shape)} and right {tuple(right.shape)} differ")
        features = self.encode(torch.cat([left, right], dim=0))
        feat_left, feat_right = features.split(left.shape[0], dim=0)
        return self.decode(feat_left, feat_right, left, right, t)

    @torch.no_grad()
    def interpolate_many(self, left: np.ndarray, right: np.ndarray, ts: Sequence[float]) -> np.ndarray:
        """Predict several offsets between one pair of 2D arrays; returns (len(ts), H, W)."""
        dtype = next(self.parameters()).dtype
        l = torch.from_numpy(np.array(left)).to(dtype)[None, None]
        r = torch.from_numpy(np.array(right)).to(dtype)[None, None]
        features = self.encode(torch.cat([l, r], dim=0))
        m = len(ts)
        fl = features[0:1].expand(m, -1, -1, -1)
        fr = features[1:2].expand(m, -1, -1, -1)
        t = torch.tensor(list(ts), dtype=dtype)
        out = self.decode(fl, fr, l.expand(m, -1, -1, -1), r.expand(m, -1, -1, -1), t)
        return out[:, 0].numpy()


@dataclass(eq=False)
class ModelParams:
    """Named weight tensors plus the metadata stored in a parameter archive."""

    tensors: dict[str, np.ndarray]
    config: ModelConfig
    stage: str = "init"
    step: int = 0
    lineage: list[str] = field(default_factory=list)
    version: int = ARCHIVE_VERSION

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    @classmethod
    def from_model(cls, model: SliceInterpolator, stage: str = "init", step: int = 0,
                   lineage: Sequence[str] | None = None) -> ModelParams:
        tensors = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(tensors, model.config, stage, step, list(lineage or []))

    def build(self) -> SliceInterpolator:
        model = SliceInterpolator(self.config)
        state = {k: torch.from_numpy(np.array(v)) for k, v in self.tensors.items()}
        model.load_state_dict(state, strict=True)
        return model


def build_model(config: ModelConfig | None = None) -> SliceInterpolator:
    return SliceInterpolator(config)


def _as_model(model_or_params) -> SliceInterpolator:
    if isinstance(model_or_params, ModelParams):
        return model_or_params.build()
    return model_or_params


def param_count(model_or_params) -> int:
    if isinstance(model_or_params, ModelParams):
        return int(sum(v.size for v in model_or_params.tensors.values()))
    return int(sum(p.numel() for p in model_or_params.parameters() if p.requires_grad))


def _to_tensor(frame: Frame, dtype) -> torch.Tensor:
    return torch.from_numpy(np.array(frame.pixels)).to(dtype)[None, None]


def forward(model_or_params, left: Frame, right: Frame, coord: TargetCoordinate) -> Frame:
    """Predict the frame at ``coord`` between ``left`` and ``right``, clipped to [0, 1]."""
    return forward_batch(model_or_params, [InterpolationSample(left, right, coord)])[0]


@torch.no_grad()
def forward_batch(model_or_params, samples: Sequence[InterpolationSample]) -> list[Frame]:
    if not samples:
        return []
    shapes = {s.left.shape for s in samples}
    if len(shapes) != 1:
        raise ShapeError(f"batch mixes frame shapes {sorted(shapes)}")
    model = _as_model(model_or_params)
    dtype = next(model.parameters()).dtype
    left = torch.cat([_to_tensor(s.left, dtype) for s in samples])
    right = torch.cat([_to_tensor(s.right, dtype) for s in samples])
    t = torch.tensor([s.coord.t for s in samples], dtype=dtype)
    out = model(left, right, t).clamp(0.0, 1.0)
    return [Frame(o[0].numpy()) for o in out]


def save_params(params, path, stage: str | None = None, step: int | None = None,
                lineage: Sequence[str] | None = None) -> Path:
    """Write a parameter archive. Accepts a model or :class:`ModelParams`."""
    if not isinstance(params, ModelParams):
        params = ModelParams.from_model(params)
    stage = params.stage if stage is None else stage
    step = params.step if step is None else step
    lineage = params.lineage if lineage is None else list(lineage)
    if stage not in STAGE_TAGS:
        raise ValueError(f"unknown stage tag {stage!r}")
    entries, chunks, offset = [], [], 0
    for name, value in params.tensors.items():
        arr = np.asarray(value)
        data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.newbyteorder("<").str,
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "format_version": ARCHIVE_VERSION,
        "config": params.config.to_dict(),
        "fingerprint": params.config.fingerprint(),
        "stage": stage,
        "step": int(step),
        "lineage": list(lineage),
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)
    return path


def read_archive_header(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(len(ARCHIVE_MAGIC))
        if magic != ARCHIVE_MAGIC:
            raise FormatError(f"{path}: not a parameter archive (bad magic)")
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise FormatError(f"{path}: truncated archive header")
        (length,) = struct.unpack("<Q", raw_len)
        blob = fh.read(length)
    try:
        return json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupted archive header ({exc})") from exc


def load_params(path, config: ModelConfig | None = None) -> ModelParams:
    """Read an archive; if ``config`` is given its fingerprint must match."""
    path = Path(path)
    header = read_archive_header(path)
    data = path.read_bytes()
    payload_start = len(ARCHIVE_MAGIC) + 8 + struct.unpack("<Q", data[8:16])[0]
    payload = data[payload_start:]
    try:
        stored = ModelConfig.from_dict(header["config"])
        entries = header["tensors"]
        fingerprint = header["fingerprint"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: archive header missing fields ({exc})") from exc
    if stored.fingerprint() != fingerprint:
        raise FormatError(f"{path}: stored fingerprint does not match stored config")
    if config is not None and config.fingerprint() != fingerprint:
        raise CompatibilityError(
            f"{path}: archive fingerprint {fingerprint} does not match requested config "
            f"{config.fingerprint()}"
        )
    tensors = {}
    for e in entries:
        start, nbytes = e["offset"], e["nbytes"]
        if start + nbytes > len(payload):
            raise FormatError(f"{path}: tensor {e['name']} runs past end of archive")
        arr = np.frombuffer(payload[start:start + nbytes], dtype=np.dtype(e["dtype"]))
        expected = int(np.prod(e["shape"])) if e["shape"] else 1
        if arr.size != expected:
            raise FormatError(f"{path}: tensor {e['name']} has wrong element count")
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(arr.dtype.newbyteorder("="))
    return ModelParams(tensors, stored, header.get("stage", "init"), int(header.get("step", 0)),
                       list(header.get("lineage", [])), int(header.get("format_version", 1)))
