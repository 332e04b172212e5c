"""Stage configuration, TOML I/O and the published config schema."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import tomli
import tomli_w

from slicesr.model import ModelConfig

STAGES = ("video_pretrain", "mr_finetune", "selfsup_finetune")
STAGE_TAG = {"video_pretrain": "video-pretrain", "mr_finetune": "mr-finetune", "selfsup_finetune": "selfsup"}
PARENT_TAG = {"video_pretrain": None, "mr_finetune": "video-pretrain", "selfsup_finetune": "mr-finetune"}


@dataclass
class StageConfig:
    stage: str = "video_pretrain"
    epochs: int = 1000
    initial_lr: float = 1e-4
    lr_halving_period: int = 200
    batch_size: int = 16
    downsample_factor: int = 4
    # in-plane patch extents of each training frame
    patch_size: tuple[int, ...] = (64, 64)
    # retained LR planes per volume patch; the HR patch spans patch_slices * n planes
    patch_slices: int = 16
    patches_per_subject: int = 100
    # 0 = ceil(dataset size / batch size)
    iterations_per_epoch: int = 0
    seed: int = 0
    optimizer: str = "adam"
    adam_betas: tuple[float, ...] = (0.9, 0.999)
    checkpoint_every: int = 1
    validate_every: int = 1
    slice_profile: str = "gaussian"
    # Gaussian FWHM as a multiple of the simulated slice spacing
    fwhm_factor: float = 1.0
    frame_size: tuple[int, ...] = (90, 160)
    selfsup_axis: str = "x"
    allow_stage_mismatch: bool = False

    def __post_init__(self):
        self.patch_size = tuple(int(v) for v in self.patch_size)
        self.frame_size = tuple(int(v) for v in self.frame_size)
        self.adam_betas = tuple(float(v) for v in self.adam_betas)
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if not self.initial_lr > 0:
            raise ValueError(f"initial_lr must be > 0, got {self.initial_lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.downsample_factor < 2:
            raise ValueError(f"downsample_factor must be >= 2, got {self.downsample_factor}")
        if self.lr_halving_period < 1 or self.batch_size < 1:
            raise ValueError("lr_halving_period and batch_size must be >= 1")
        if len(self.patch_size) != 2:
            raise ValueError(f"patch_size needs two in-plane extents, got {self.patch_size}")
        if self.patch_slices < 2:
            raise ValueError(f"patch_slices must be >= 2, got {self.patch_slices}")

    @property
    def n(self) -> int:
        return self.downsample_factor

    @classmethod
    def defaults(cls, stage: str, **overrides) -> StageConfig:
        """Per-stage defaults at the published experimental scale."""
        base = {
            "video_pretrain": dict(epochs=1000, batch_size=16, slice_profile="none"),
            "mr_finetune": dict(epochs=1000, batch_size=16, slice_profile="gaussian"),
            "selfsup_finetune": dict(epochs=5, batch_size=8, slice_profile="none", patches_per_subject=100),
        }[stage]
        return cls(stage=stage, **{**base, **overrides})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# Sections a stage's TOML document may contain, besides [train] and [model].
DATA_FIELDS = {
    "video_pretrain": {"video_root": "string", "init_checkpoint": "string"},
    "mr_finetune": {"train_dir": "string", "val_dir": "string", "checkpoint": "string", "resume": "string"},
    "selfsup_finetune": {"subject": "string", "checkpoint": "string", "resume": "string"},
}
REQUIRED_DATA = {
    "video_pretrain": ["video_root"],
    "mr_finetune": ["train_dir", "checkpoint"],
    "selfsup_finetune": ["subject", "checkpoint"],
}
ENUMS = {
    "stage": list(STAGES),
    "optimizer": ["adam", "sgd"],
    "slice_profile": ["none", "gaussian"],
    "selfsup_axis": ["x", "y"],
}
MINIMA = {"epochs": 1, "downsample_factor": 2, "batch_size": 1, "lr_halving_period": 1, "patch_slices": 2,
          "patches_per_subject": 1, "iterations_per_epoch": 0, "checkpoint_every": 0, "validate_every": 0}


def _json_type(tp) -> dict:
    origin = typing.get_origin(tp)
    if tp is bool:
        return {"type": "boolean"}
    if tp is int:
        return {"type": "integer"}
    if tp is float:
        return {"type": "number"}
    if tp is str:
        return {"type": "string"}
    if origin in (tuple, list):
        (inner, *_) = typing.get_args(tp)
        return {"type": "array", "items": _json_type(inner), "minItems": 1}
    raise TypeError(f"no schema mapping for {tp}")


def _dataclass_schema(cls, enums=None, minima=None) -> dict:
    hints = typing.get_type_hints(cls)
    props = {}
    for f in dataclasses.fields(cls):
        prop = _json_type(hints[f.name])
        if enums and f.name in enums:
            prop["enum"] = enums[f.name]
        if minima and f.name in minima:
            prop["minimum"] = minima[f.name]
        props[f.name] = prop
    return {"type": "object", "properties": props, "additionalProperties": False}


def stage_schema(stage: str) -> dict:
    """JSON Schema for the TOML document of one training subcommand."""
    train = _dataclass_schema(StageConfig, ENUMS, MINIMA)
    train["properties"]["initial_lr"]["exclusiveMinimum"] = 0
    data = {
        "type": "object",
        "properties": {k: {"type": v} for k, v in DATA_FIELDS[stage].items()},
        "required": REQUIRED_DATA[stage],
        "additionalProperties": False,
    }
    run = {
        "type": "object",
        "properties": {"dir": {"type": "string"}, "threads": {"type": "integer", "minimum": 1}},
        "additionalProperties": False,
    }
    sections = {"run": run, "data": data, "train": train}
    if stage == "video_pretrain":
        sections["model"] = _dataclass_schema(ModelConfig)
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": f"slicesr {stage} config",
        "type": "object",
        "properties": sections,
        "required": ["data"],
        "additionalProperties": False,
    }


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists one message per offending field."""

    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("invalid config:\n  " + "\n  ".join(errors))


@dataclass
class RunConfig:
    """A fully resolved training document."""

    stage: str
    train: StageConfig
    data: dict = field(default_factory=dict)
    model: ModelConfig | None = None
    run: dict = field(default_factory=dict)

    def to_document(self) -> dict:
        doc = {"run": dict(self.run), "data": dict(self.data), "train": self.train.to_dict()}
        if self.model is not None:
            doc["model"] = self.model.to_dict()
        return doc

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_document())

    def config_hash(self) -> str:
        blob = json.dumps(self.to_document(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def validate_document(doc: dict, stage: str) -> None:
    validator = jsonschema.Draft202012Validator(stage_schema(stage))
    errors = []
    for err in sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path)):
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        errors.append(f"{where}: {err.message}")
    train = doc.get("train", {})
    if not errors and train.get("stage", stage) != stage:
        errors.append(f"train.stage: {train['stage']!r} does not match subcommand stage {stage!r}")
    if errors:
        raise ConfigError(errors)


def resolve_document(doc: dict, stage: str) -> RunConfig:
    validate_document(doc, stage)
    train_doc = dict(doc.get("train", {}))
    train_doc.pop("stage", None)
    try:
        train = StageConfig.defaults(stage, **train_doc)
        model = ModelConfig(**doc.get("model", {})) if stage == "video_pretrain" else None
    except (TypeError, ValueError) as exc:
        raise ConfigError([str(exc)]) from exc
    return RunConfig(stage, train, dict(doc.get("data", {})), model, dict(doc.get("run", {})))


def load_config(path, stage: str) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc
    return resolve_document(doc, stage)


def write_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(cfg.to_toml())
    return path
