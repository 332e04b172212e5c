"""Three-stage training: video pre-training, supervised MR fine-tuning and
per-subject self-supervised fine-tuning.

Every stage minimises the mean absolute error between the predicted and the
true intermediate frame. Sampling uses a fresh generator per epoch seeded
from ``(seed, stage, epoch)``, so resuming from a checkpoint replays the
exact same batches.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from slicesr.config import PARENT_TAG, STAGE_TAG, STAGES, StageConfig
from slicesr.core import Frame, FrameSequence, Volume, axis_index
from slicesr.degrade import (
    DegradeSpec,
    build_selfsup_pair,
    decimate,
    random_corner,
    sample_subsequence,
    window_length,
)
from slicesr.errors import ShapeError, StageMismatchError, TrainingDivergedError
from slicesr.infer import hr_reference_grid, super_resolve
from slicesr.metrics import psnr
from slicesr.model import ModelParams, SliceInterpolator, load_params, save_params

log = logging.getLogger(__name__)

Batch = tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]  # left, right, t, target


def l1_loss(pred, target):
    """Mean absolute per-pixel difference.

    Tensors in, tensor out (differentiable); Frames or arrays in, float out.
    """
    if isinstance(pred, torch.Tensor):
        if pred.shape != target.shape:
            raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
        return (pred - target).abs().mean()
    a = pred.pixels if isinstance(pred, Frame) else np.asarray(pred)
    b = target.pixels if isinstance(target, Frame) else np.asarray(target)
    if a.shape != b.shape:
        raise ShapeError(f"prediction {a.shape} vs target {b.shape}")
    return float(np.mean(np.abs(a.astype(np.float64) - b.astype(np.float64))))


def smooth_l1_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Charbonnier-smoothed L1, differentiable everywhere (used for gradient checks)."""
    return torch.sqrt((pred - target) ** 2 + eps ** 2).mean()


def lr_schedule(epoch: int, cfg: StageConfig) -> float:
    return cfg.initial_lr * 0.5 ** (epoch // cfg.lr_halving_period)


@dataclass(eq=False)
class Checkpoint:
    params: ModelParams
    epoch: int = 0
    stage: str = "init"
    optimizer_state: dict | None = None
    loss_history: list[float] = field(default_factory=list)
    val_history: list[dict] = field(default_factory=list)
    info: dict = field(default_factory=dict)
    path: Path | None = None

    def build_model(self) -> SliceInterpolator:
        return self.params.build()

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1] if self.loss_history else math.nan


def initial_checkpoint(model: SliceInterpolator) -> Checkpoint:
    """Wrap an untrained model as a stage-'init' checkpoint."""
    return Checkpoint(ModelParams.from_model(model, "init", 0), stage="init")


def save_checkpoint(ckpt: Checkpoint, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_params(ckpt.params, directory / "params.srp")
    if ckpt.optimizer_state is not None:
        torch.save(ckpt.optimizer_state, directory / "optimizer.pt")
    state = {"epoch": ckpt.epoch, "stage": ckpt.stage, "loss_history": ckpt.loss_history,
             "val_history": ckpt.val_history, "info": ckpt.info}
    (directory / "state.json").write_text(json.dumps(state, indent=2))
    ckpt.path = directory
    return directory


def load_checkpoint(path) -> Checkpoint:
    """Load a checkpoint directory, a run directory (its ``final/``) or a bare archive."""
    path = Path(path)
    if path.is_file():
        params = load_params(path)
        return Checkpoint(params, params.step, params.stage, path=path)
    if (path / "final" / "params.srp").is_file():
        path = path / "final"
    params = load_params(path / "params.srp")
    state = json.loads((path / "state.json").read_text()) if (path / "state.json").is_file() else {}
    opt_path = path / "optimizer.pt"
    opt_state = torch.load(opt_path, weights_only=False) if opt_path.is_file() else None
    return Checkpoint(params, state.get("epoch", params.step), state.get("stage", params.stage), opt_state,
                      state.get("loss_history", []), state.get("val_history", []), state.get("info", {}), path)


def _check_parent(ckpt: Checkpoint, cfg: StageConfig) -> None:
    expected = PARENT_TAG[cfg.stage]
    if expected and ckpt.stage != expected and not cfg.allow_stage_mismatch:
        raise StageMismatchError(
            f"{cfg.stage} expects a {expected!r} checkpoint, got {ckpt.stage!r} "
            "(set allow_stage_mismatch to override)"
        )


def _make_optimizer(model, cfg: StageConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.initial_lr, betas=tuple(cfg.adam_betas))
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(model.parameters(), lr=cfg.initial_lr, momentum=0.9)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def _to_batch(items: Sequence[tuple[np.ndarray, np.ndarray, float, np.ndarray]]) -> Batch:
    left = np.stack([i[0] for i in items]).astype(np.float32)
    right = np.stack([i[1] for i in items]).astype(np.float32)
    t = np.array([i[2] for i in items], dtype=np.float32)
    target = np.stack([i[3] for i in items]).astype(np.float32)
    return left, right, t, target


def _tensors(batch: Batch):
    left, right, t, target = batch
    as_t = lambda a: torch.from_numpy(np.ascontiguousarray(a))[:, None]  # noqa: E731
    return as_t(left), as_t(right), torch.from_numpy(t), as_t(target)


def _iterations(cfg: StageConfig, dataset_size: int) -> int:
    return cfg.iterations_per_epoch or max(1, math.ceil(dataset_size / cfg.batch_size))


class VideoSampler:
    """Frame triples drawn by the 15n+1 window rule with one crop per draw."""

    def __init__(self, seqs: Sequence[FrameSequence], cfg: StageConfig):
        if not seqs:
            raise ValueError("video pre-training needs at least one sequence")
        need = window_length(cfg.n)
        short = [s.source_id or str(i) for i, s in enumerate(seqs) if len(s) < need]
        if short:
            raise ValueError(f"sequences shorter than {need} frames (15n+1, n={cfg.n}): {short}")
        ph, pw = cfg.patch_size
        h, w = seqs[0].frame_shape
        if any(s.frame_shape != (h, w) for s in seqs) or ph > h or pw > w:
            raise ShapeError(f"all sequences must share a frame size of at least {cfg.patch_size}")
        self.seqs = list(seqs)
        self.cfg = cfg

    def draw(self, rng: np.random.Generator):
        sub = sample_subsequence(self.seqs[int(rng.integers(len(self.seqs)))], self.cfg.n, rng)
        gap, k, target = sub.groundtruth[int(rng.integers(len(sub.groundtruth)))]
        # one crop window shared by every frame of the window
        corner = random_corner(target.shape, self.cfg.patch_size, rng)
        region = tuple(slice(c, c + s) for c, s in zip(corner, self.cfg.patch_size))
        return (sub.kept[gap].pixels[region], sub.kept[gap + 1].pixels[region], k / sub.n,
                target.pixels[region])

    def epoch(self, rng) -> Iterator[Batch]:
        for _ in range(_iterations(self.cfg, len(self.seqs))):
            yield _to_batch([self.draw(rng) for _ in range(self.cfg.batch_size)])


def hr_patch_extent(cfg: StageConfig) -> tuple[int, int, int]:
    return (*cfg.patch_size, cfg.patch_slices * cfg.n)


class MRSampler:
    """Crop an HR patch, simulate its LR version along z, pick a gap and offset."""

    def __init__(self, volumes: Sequence[Volume], cfg: StageConfig):
        if not volumes:
            raise ValueError("MR fine-tuning needs at least one HR volume")
        size = hr_patch_extent(cfg)
        small = [v.subject_id for v in volumes if any(e < s for e, s in zip(v.shape, size))]
        if small:
            raise ShapeError(f"HR volumes smaller than the {size} patch: {small}")
        self.volumes = list(volumes)
        self.cfg = cfg

    def draw(self, rng):
        cfg, n = self.cfg, self.cfg.n
        vol = self.volumes[int(rng.integers(len(self.volumes)))]
        size = hr_patch_extent(cfg)
        corner = random_corner(vol.shape, size, rng)
        hr = Volume(vol.voxels[tuple(slice(c, c + s) for c, s in zip(corner, size))], vol.spacing, vol.subject_id)
        lr = simulate_lr(hr, cfg)
        j = int(rng.integers(cfg.patch_slices - 1))
        k = int(rng.integers(1, n))
        return lr.voxels[:, :, j], lr.voxels[:, :, j + 1], k / n, hr.voxels[:, :, j * n + k]

    def epoch(self, rng) -> Iterator[Batch]:
        for _ in range(_iterations(self.cfg, len(self.volumes))):
            yield _to_batch([self.draw(rng) for _ in range(self.cfg.batch_size)])


def simulate_lr(hr: Volume, cfg: StageConfig) -> Volume:
    n = cfg.n
    fwhm = cfg.fwhm_factor * n * hr.spacing[2] if cfg.slice_profile == "gaussian" else None
    return decimate(hr, DegradeSpec("z", n, cfg.slice_profile, fwhm))


class SelfSupSampler:
    """Fixed set of patches from one subject, decimated along an in-plane axis."""

    def __init__(self, subject: Volume, cfg: StageConfig, rng: np.random.Generator):
        n = cfg.n
        fwhm = cfg.fwhm_factor * n * subject.spacing[axis_index(cfg.selfsup_axis)]
        degraded, reference = build_selfsup_pair(subject, n, cfg.selfsup_axis, rng, cfg.slice_profile,
                                                 fwhm if cfg.slice_profile == "gaussian" else None)
        ax = axis_index(cfg.selfsup_axis)
        inp = np.moveaxis(degraded.voxels, ax, 0)
        ref = np.moveaxis(reference.voxels, ax, 0)
        pa, pb = cfg.patch_size
        need = ((cfg.patch_slices - 1) * n + 1, pa, pb)
        if inp.shape[0] < cfg.patch_slices or ref.shape[1] < pa or ref.shape[2] < pb:
            raise ShapeError(
                f"subject {subject.subject_id!r} has extents {ref.shape} along "
                f"({cfg.selfsup_axis}, remaining axes); self-supervised patches need at least {need}"
            )
        self.cfg = cfg
        self.patches = []
        for _ in range(cfg.patches_per_subject):
            c0, c1, c2 = random_corner((inp.shape[0], ref.shape[1], ref.shape[2]), (cfg.patch_slices, pa, pb), rng)
            planes = inp[c0:c0 + cfg.patch_slices, c1:c1 + pa, c2:c2 + pb]
            span = ref[c0 * n:c0 * n + (cfg.patch_slices - 1) * n + 1, c1:c1 + pa, c2:c2 + pb]
            self.patches.append((planes, span))
        log.info("extracted %d patches from subject %s", len(self.patches), subject.subject_id)

    def epoch(self, rng) -> Iterator[Batch]:
        n, bs = self.cfg.n, self.cfg.batch_size
        order = rng.permutation(len(self.patches))
        for s in range(0, len(order), bs):
            items = []
            for idx in order[s:s + bs]:
                planes, span = self.patches[idx]
                j = int(rng.integers(len(planes) - 1))
                k = int(rng.integers(1, n))
                items.append((planes[j], planes[j + 1], k / n, span[j * n + k]))
            yield _to_batch(items)


class LossLog:
    """CSV of per-iteration losses; values written with full float precision."""

    def __init__(self, path: Path | None, append: bool):
        self.path = path
        if path is not None and not (append and path.exists()):
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(["epoch", "iteration", "lr", "loss"])

    def write(self, rows) -> None:
        if self.path is None or not rows:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerows([[e, i, repr(lr), repr(loss)] for e, i, lr, loss in rows])


def _run_stage(
    model: SliceInterpolator,
    cfg: StageConfig,
    sampler,
    lineage: list[str],
    run_dir=None,
    resume: Checkpoint | None = None,
    validate: Callable[[SliceInterpolator], dict] | None = None,
    info: dict | None = None,
) -> Checkpoint:
    stage_tag = STAGE_TAG[cfg.stage]
    stage_id = STAGES.index(cfg.stage)
    run_dir = Path(run_dir) if run_dir is not None else None
    optimizer = _make_optimizer(model, cfg)
    start_epoch, history, val_history = 0, [], []
    if resume is not None:
        if resume.stage != stage_tag:
            raise StageMismatchError(f"cannot resume {cfg.stage} from a {resume.stage!r} checkpoint")
        if resume.optimizer_state is None:
            raise ValueError("resume checkpoint carries no optimizer state")
        optimizer.load_state_dict(resume.optimizer_state)
        start_epoch, history, val_history = resume.epoch, list(resume.loss_history), list(resume.val_history)
    info = dict(info or {})
    loss_log = LossLog(run_dir / "loss.csv" if run_dir else None, append=resume is not None)
    last_good: Path | None = resume.path if resume is not None else None
    best_psnr = max((v.get("psnr", -math.inf) for v in val_history), default=-math.inf)
    started = time.perf_counter()

    def snapshot(epoch: int) -> Checkpoint:
        params = ModelParams.from_model(model, stage_tag, epoch, lineage)
        return Checkpoint(params, epoch, stage_tag, optimizer.state_dict(), list(history), list(val_history),
                          {**info, "wall_clock_s": time.perf_counter() - started})

    ckpt = snapshot(start_epoch)
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng([cfg.seed, stage_id, epoch])
        model.train()
        rows, losses = [], []
        for it, batch in enumerate(sampler.epoch(rng)):
            left, right, t, target = _tensors(batch)
            loss = l1_loss(model(left, right, t), target)
            value = float(loss.detach())
            if not math.isfinite(value):
                loss_log.write(rows)
                raise TrainingDivergedError(
                    f"{cfg.stage}: non-finite loss {value} at epoch {epoch} iteration {it}; "
                    f"last good checkpoint: {last_good}"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            rows.append((epoch, it, lr, value))
            losses.append(value)
        loss_log.write(rows)
        history.append(float(np.mean(losses)))
        log.info("%s epoch %d/%d lr=%.3g loss=%.6f", cfg.stage, epoch + 1, cfg.epochs, lr, history[-1])
        done = epoch + 1
        is_best = False
        if validate is not None and cfg.validate_every and (done % cfg.validate_every == 0 or done == cfg.epochs):
            model.eval()
            metrics = {"epoch": done, **validate(model)}
            val_history.append(metrics)
            log.info("%s validation after epoch %d: %s", cfg.stage, done, metrics)
            if metrics.get("psnr", -math.inf) > best_psnr:
                best_psnr, is_best = metrics["psnr"], True
        ckpt = snapshot(done)
        if run_dir is not None:
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                last_good = save_checkpoint(ckpt, run_dir / "checkpoints" / f"epoch_{done:04d}")
            if is_best:
                save_checkpoint(ckpt, run_dir / "best")
    elapsed = time.perf_counter() - started
    ckpt.info["wall_clock_s"] = elapsed
    ckpt.info["epochs_run"] = cfg.epochs - start_epoch
    log.info("%s finished %d epoch(s) in %.1fs", cfg.stage, cfg.epochs - start_epoch, elapsed)
    if run_dir is not None:
        final = save_checkpoint(ckpt, run_dir / "final")
        _write_manifest(run_dir, ckpt, cfg, final)
    return ckpt


def _write_manifest(run_dir: Path, ckpt: Checkpoint, cfg: StageConfig, final: Path) -> None:
    from slicesr.config import RunConfig

    manifest = {
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "lineage": ckpt.params.lineage,
        "loss_history": ckpt.loss_history,
        "val_history": ckpt.val_history,
        "train_config_hash": RunConfig(cfg.stage, cfg).config_hash(),
        "seed": cfg.seed,
        "final_checkpoint": str(final.relative_to(run_dir)),
        "checkpoints": sorted(str(p.relative_to(run_dir)) for p in (run_dir / "checkpoints").glob("epoch_*"))
        if (run_dir / "checkpoints").is_dir() else [],
        "info": ckpt.info,
    }
    if (run_dir / "best").is_dir():
        manifest["best_checkpoint"] = "best"
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))


def train_stage1(
    seqs: Sequence[FrameSequence],
    cfg: StageConfig,
    model: SliceInterpolator | None = None,
    run_dir=None,
    resume: Checkpoint | None = None,
) -> Checkpoint:
    """Video frame interpolation pre-training."""
    if cfg.stage != "video_pretrain":
        raise ValueError(f"train_stage1 needs a video_pretrain config, got {cfg.stage}")
    sampler = VideoSampler(seqs, cfg)
    if resume is not None:
        model = resume.build_model()
    model = model or SliceInterpolator()
    return _run_stage(model, cfg, sampler, ["video-pretrain"], run_dir, resume)


def validation_metrics(model: SliceInterpolator, volumes: Sequence[Volume], cfg: StageConfig) -> dict:
    """Mean PSNR and L1 of full-volume reconstruction on simulated LR inputs."""
    psnrs, l1s = [], []
    for hr in volumes:
        lr = simulate_lr(hr, cfg)
        sr = super_resolve(lr, model, cfg.n)
        ref = hr_reference_grid(hr, cfg.n)
        psnrs.append(psnr(ref, sr))
        l1s.append(l1_loss(ref.voxels, sr.voxels))
    return {"psnr": float(np.mean(psnrs)), "l1": float(np.mean(l1s))}


def train_stage2(
    hr_volumes: Sequence[Volume],
    cfg: StageConfig,
    checkpoint: Checkpoint | None = None,
    val_volumes: Sequence[Volume] | None = None,
    run_dir=None,
    resume: Checkpoint | None = None,
) -> Checkpoint:
    """Supervised fine-tuning on HR volumes with simulated LR inputs."""
    if cfg.stage != "mr_finetune":
        raise ValueError(f"train_stage2 needs an mr_finetune config, got {cfg.stage}")
    if resume is None and checkpoint is None:
        raise ValueError("train_stage2 needs a starting checkpoint")
    start = resume if resume is not None else checkpoint
    if resume is None:
        _check_parent(checkpoint, cfg)
        lineage = [*checkpoint.params.lineage, "mr-finetune"]
    else:
        lineage = list(resume.params.lineage)
    sampler = MRSampler(hr_volumes, cfg)
    validate = (lambda m: validation_metrics(m, val_volumes, cfg)) if val_volumes else None
    return _run_stage(start.build_model(), cfg, sampler, lineage, run_dir, resume, validate)


def train_stage3(
    subject_lr: Volume,
    cfg: StageConfig,
    checkpoint: Checkpoint | None = None,
    run_dir=None,
    resume: Checkpoint | None = None,
) -> Checkpoint:
    """Subject-specific self-supervised fine-tuning of all parameters."""
    if cfg.stage != "selfsup_finetune":
        raise ValueError(f"train_stage3 needs a selfsup_finetune config, got {cfg.stage}")
    if resume is None and checkpoint is None:
        raise ValueError("train_stage3 needs a starting checkpoint")
    start = resume if resume is not None else checkpoint
    if resume is None:
        _check_parent(checkpoint, cfg)
        lineage = [*checkpoint.params.lineage, "selfsup"]
    else:
        lineage = list(resume.params.lineage)
    # patch selection has its own stream, independent of per-epoch sampling
    sampler = SelfSupSampler(subject_lr, cfg, np.random.default_rng([cfg.seed, 99]))
    info = {"patches": len(sampler.patches), "subject_id": subject_lr.subject_id}
    return _run_stage(start.build_model(), cfg, sampler, lineage, run_dir, resume, info=info)
