"""Desk-scale ablation on synthetic data mirroring the VP / SF / SSF study.

Stands in for the video, public-MR and target-MR datasets with generators
from :mod:`slicesr.synth`. Target subjects carry an inverted contrast so
that they differ from the fine-tuning set the way a new modality would.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from slicesr.config import StageConfig
from slicesr.core import Volume
from slicesr.degrade import DegradeSpec, decimate
from slicesr.infer import hr_reference_grid, super_resolve, trilinear_upsample
from slicesr.metrics import MetricReport, evaluate_dataset
from slicesr.model import ModelConfig, SliceInterpolator
from slicesr.synth import invert_contrast, make_phantom_volume, make_video
from slicesr.train import Checkpoint, initial_checkpoint, train_stage1, train_stage2, train_stage3

log = logging.getLogger(__name__)

TOY_MODEL = ModelConfig(encoder_channels=(16, 32, 32), blocks_per_stage=1, feature_dim=32,
                        coord_frequencies=4, decoder_widths=(64, 1))


@dataclass
class ToySuite:
    n: int = 4
    seed: int = 0
    model: ModelConfig = TOY_MODEL
    video_kinds: tuple[str, ...] = ("moving_blob", "translating_gradient", "rotating_bars")
    videos_per_kind: int = 2
    video_frames: int = 64
    video_size: tuple[int, int] = (48, 48)
    train_kinds: tuple[str, ...] = ("layered_tissue", "sinusoid_z", "sphere_shells")
    train_per_kind: int = 6
    test_kinds: tuple[str, ...] = ("sinusoid_z", "layered_tissue")
    test_per_kind: int = 3
    volume_size: tuple[int, int, int] = (32, 32, 64)
    test_size: tuple[int, int, int] = (64, 32, 64)
    invert_test_contrast: bool = True
    lr_profile: str = "none"
    stage1: StageConfig = field(default_factory=lambda: StageConfig.defaults(
        "video_pretrain", epochs=10, iterations_per_epoch=100, batch_size=8, patch_size=(32, 32),
        initial_lr=2e-3, lr_halving_period=4))
    stage2: StageConfig = field(default_factory=lambda: StageConfig.defaults(
        "mr_finetune", epochs=8, iterations_per_epoch=40, batch_size=8, patch_size=(32, 32),
        patch_slices=8, initial_lr=1e-3, lr_halving_period=3))
    stage3: StageConfig = field(default_factory=lambda: StageConfig.defaults(
        "selfsup_finetune", epochs=5, batch_size=8, patch_size=(32, 16), patch_slices=8))

    def videos(self):
        return [make_video(k, self.video_frames, self.video_size, seed=self.seed * 100 + i)
                for k in self.video_kinds for i in range(self.videos_per_kind)]

    def train_volumes(self) -> list[Volume]:
        return [make_phantom_volume(k, self.volume_size, seed=1000 + self.seed * 100 + i)
                for k in self.train_kinds for i in range(self.train_per_kind)]

    def test_volumes(self) -> list[Volume]:
        vols = [make_phantom_volume(k, self.test_size, seed=5000 + self.seed * 100 + i)
                for k in self.test_kinds for i in range(self.test_per_kind)]
        return [invert_contrast(v) if self.invert_test_contrast else v for v in vols]

    def simulate(self, hr: Volume) -> Volume:
        lr = decimate(hr, DegradeSpec("z", self.n, self.lr_profile))
        return lr.replace(spacing=(1.0, 1.0, float(self.n)))


@dataclass
class AblationResult:
    reports: dict[str, MetricReport]
    flags: dict[str, dict]
    seconds: dict[str, float]

    def psnr(self, name: str) -> float:
        return self.reports[name].psnr_mean


def _evaluate(suite: ToySuite, tests, predict) -> MetricReport:
    pairs = []
    for hr in tests:
        lr = suite.simulate(hr)
        pairs.append((hr.subject_id, hr_reference_grid(hr, suite.n), predict(lr)))
    return evaluate_dataset(pairs)


def run_toy_ablation(suite: ToySuite | None = None, include_sf_ssf: bool = False) -> AblationResult:
    suite = suite or ToySuite()
    n = suite.n
    s1 = replace(suite.stage1, downsample_factor=n, seed=suite.seed)
    s2 = replace(suite.stage2, downsample_factor=n, seed=suite.seed, slice_profile=suite.lr_profile)
    s2_scratch = replace(s2, allow_stage_mismatch=True)
    s3 = replace(suite.stage3, downsample_factor=n, seed=suite.seed)
    tests = suite.test_volumes()
    train_vols = suite.train_volumes()
    reports, seconds = {}, {}

    clock = time.perf_counter()
    reports["Trilinear"] = _evaluate(suite, tests, lambda lr: trilinear_upsample(lr, n))

    init = initial_checkpoint(SliceInterpolator(suite.model))
    sf = train_stage2(train_vols, s2_scratch, init)
    seconds["SF"] = time.perf_counter() - clock
    reports["SF"] = _evaluate(suite, tests, lambda lr: super_resolve(lr, sf.params, n))

    clock = time.perf_counter()
    vp = train_stage1(suite.videos(), s1, SliceInterpolator(suite.model))
    vp_sf = train_stage2(train_vols, s2, vp)
    seconds["VP+SF"] = time.perf_counter() - clock
    reports["VP+SF"] = _evaluate(suite, tests, lambda lr: super_resolve(lr, vp_sf.params, n))

    def with_selfsup(start: Checkpoint, cfg: StageConfig):
        return lambda lr: super_resolve(lr, train_stage3(lr, cfg, start).params, n)

    clock = time.perf_counter()
    reports["VP+SF+SSF"] = _evaluate(suite, tests, with_selfsup(vp_sf, s3))
    seconds["VP+SF+SSF"] = seconds["VP+SF"] + time.perf_counter() - clock
    flags = {
        "SF": {"VP": False, "SF": True, "SSF": False},
        "VP+SF": {"VP": True, "SF": True, "SSF": False},
        "VP+SF+SSF": {"VP": True, "SF": True, "SSF": True},
    }
    if include_sf_ssf:
        clock = time.perf_counter()
        reports["SF+SSF"] = _evaluate(suite, tests, with_selfsup(sf, replace(s3, allow_stage_mismatch=True)))
        flags["SF+SSF"] = {"VP": False, "SF": True, "SSF": True}
        seconds["SF+SSF"] = seconds["SF"] + time.perf_counter() - clock
    for name, rep in reports.items():
        log.info("%-10s PSNR %.3f ± %.3f  SSIM %.4f", name, rep.psnr_mean, rep.psnr_sd, rep.ssim_mean)
    return AblationResult(reports, flags, seconds)
