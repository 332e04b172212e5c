import logging
import math

import numpy as np
import pytest
import torch

from slicesr.config import StageConfig
from slicesr.degrade import DegradeSpec, decimate
from slicesr.errors import ShapeError, StageMismatchError, TrainingDivergedError
from slicesr.infer import hr_reference_grid, super_resolve, trilinear_upsample
from slicesr.metrics import psnr
from slicesr.model import SliceInterpolator
from slicesr.synth import invert_contrast, make_phantom_volume, make_video
from slicesr.train import (
    Checkpoint,
    MRSampler,
    hr_patch_extent,
    initial_checkpoint,
    l1_loss,
    load_checkpoint,
    lr_schedule,
    train_stage1,
    train_stage2,
    train_stage3,
    validation_metrics,
)

from conftest import TINY, perturb_head


def _s1(**kw):
    base = dict(epochs=2, iterations_per_epoch=5, batch_size=2, patch_size=(16, 16), initial_lr=1e-3)
    return StageConfig.defaults("video_pretrain", **{**base, **kw})


def _s2(**kw):
    base = dict(epochs=2, iterations_per_epoch=5, batch_size=2, patch_size=(16, 16), patch_slices=4,
                initial_lr=1e-3, slice_profile="none")
    return StageConfig.defaults("mr_finetune", **{**base, **kw})


def _s3(**kw):
    base = dict(epochs=2, patches_per_subject=6, batch_size=2, patch_size=(16, 8), patch_slices=4)
    return StageConfig.defaults("selfsup_finetune", **{**base, **kw})


def _videos(count=2, frames=64, size=(24, 24)):
    return [make_video("translating_gradient", frames, size, seed=i) for i in range(count)]


def _ckpt(stage: str, model=None) -> Checkpoint:
    ckpt = initial_checkpoint(model or SliceInterpolator(TINY))
    ckpt.stage = ckpt.params.stage = stage
    return ckpt


def _subject(kind="sinusoid_z", size=(32, 32, 16), seed=0):
    hr = make_phantom_volume(kind, size, seed=seed)
    return hr.replace(spacing=(1.0, 1.0, 4.0))


def test_l1_values():
    a = np.zeros((64, 64))
    assert l1_loss(a, a) == 0.0
    assert l1_loss(a, np.ones((64, 64))) == 1.0


def test_l1_scalar_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.random((7, 9)), rng.random((7, 9))
    total = 0.0
    for i in range(7):
        for j in range(9):
            total += abs(a[i, j] - b[i, j])
    assert l1_loss(a, b) == pytest.approx(total / 63, abs=1e-12)


def test_l1_shape_mismatch():
    with pytest.raises(ShapeError):
        l1_loss(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ShapeError):
        l1_loss(torch.zeros(3, 3), torch.zeros(3, 4))


def test_schedule_monotone():
    cfg = StageConfig(initial_lr=1e-4, lr_halving_period=200)
    values = [lr_schedule(e, cfg) for e in range(1000)]
    assert all(b <= a for a, b in zip(values, values[1:]))
    assert lr_schedule(999, cfg) == pytest.approx(6.25e-6, rel=1e-12)


def test_stage_config_invariants():
    with pytest.raises(ValueError):
        StageConfig(initial_lr=0.0)
    with pytest.raises(ValueError):
        StageConfig(epochs=0)
    with pytest.raises(ValueError):
        StageConfig(downsample_factor=1)


def test_stage1_loss_decreases(tmp_path):
    cfg = _s1(epochs=4, iterations_per_epoch=50, batch_size=4, initial_lr=2e-3, lr_halving_period=10)
    ckpt = train_stage1(_videos(), cfg, SliceInterpolator(TINY), run_dir=tmp_path)
    assert ckpt.stage == "video-pretrain" and ckpt.epoch == 4
    assert ckpt.loss_history[-1] < ckpt.loss_history[0]
    assert (tmp_path / "final" / "params.srp").is_file()
    assert len(list((tmp_path / "checkpoints").iterdir())) == 4


def test_stage1_empty_and_short():
    with pytest.raises(ValueError):
        train_stage1([], _s1(), SliceInterpolator(TINY))
    with pytest.raises(ValueError, match="61"):
        train_stage1(_videos(frames=40), _s1(), SliceInterpolator(TINY))


def test_divergence_aborts_with_last_good(tmp_path):
    model = SliceInterpolator(TINY)
    first = train_stage1(_videos(), _s1(epochs=1), model, run_dir=tmp_path / "a")
    model = first.build_model()
    with torch.no_grad():
        model.decoder[-1].bias.fill_(math.nan)
    with pytest.raises(TrainingDivergedError, match="epoch 0 iteration 0"):
        train_stage1(_videos(), _s1(), model, run_dir=tmp_path / "b")


def test_stage2_patch_extent():
    assert hr_patch_extent(StageConfig.defaults("mr_finetune")) == (64, 64, 64)


def test_stage2_requires_parent_stage():
    vols = [make_phantom_volume("sinusoid_z", (16, 16, 16))]
    with pytest.raises(StageMismatchError):
        train_stage2(vols, _s2(), initial_checkpoint(SliceInterpolator(TINY)))
    ckpt = train_stage2(vols, _s2(allow_stage_mismatch=True), initial_checkpoint(SliceInterpolator(TINY)))
    assert ckpt.stage == "mr-finetune"


def test_stage2_empty_and_small():
    with pytest.raises(ValueError):
        train_stage2([], _s2(), _ckpt("video-pretrain"))
    with pytest.raises(ShapeError):
        MRSampler([make_phantom_volume("sinusoid_z", (16, 16, 12))], _s2())


def test_all_parameters_change_after_one_step():
    model = perturb_head(SliceInterpolator(TINY))
    before = {k: v.numpy().copy() for k, v in model.state_dict().items()}
    vols = [make_phantom_volume("layered_tissue", (16, 16, 16), seed=1)]
    ckpt = train_stage2(vols, _s2(epochs=1, iterations_per_epoch=1), _ckpt("video-pretrain", model))
    after = ckpt.params.tensors
    unchanged = [k for k in before if np.array_equal(before[k], after[k])]
    assert unchanged == []


def test_stage2_beats_trilinear_on_validation():
    train = [make_phantom_volume(k, (32, 32, 32), seed=10 + i) for k in ("sinusoid_z", "layered_tissue")
             for i in range(2)]
    val = [make_phantom_volume("layered_tissue", (32, 32, 32), seed=90)]
    cfg = _s2(epochs=3, iterations_per_epoch=100, batch_size=4, patch_size=(32, 32), patch_slices=8,
              initial_lr=2e-3)
    ckpt = train_stage2(train, cfg, _ckpt("video-pretrain"), val_volumes=val)
    assert len(ckpt.val_history) == 3
    lr = decimate(val[0], DegradeSpec("z", 4, "none"))
    baseline = psnr(hr_reference_grid(val[0], 4), trilinear_upsample(lr, 4))
    assert ckpt.val_history[-1]["psnr"] > baseline


def test_validation_metrics_fresh_model_equals_trilinear():
    hr = make_phantom_volume("sinusoid_z", (16, 16, 17), seed=2)
    cfg = _s2()
    m = validation_metrics(SliceInterpolator(TINY), [hr], cfg)
    lr = decimate(hr, DegradeSpec("z", 4, "none"))
    assert m["psnr"] == pytest.approx(psnr(hr_reference_grid(hr, 4), trilinear_upsample(lr, 4)), abs=1e-6)


def test_stage3_defaults_and_tags(caplog):
    ckpt = _ckpt("mr-finetune")
    subject = _subject(size=(32, 32, 16))
    with caplog.at_level(logging.INFO, logger="slicesr.train"):
        out = train_stage3(subject, _s3(), ckpt)
    assert out.stage == "selfsup" and out.info["patches"] == 6
    assert out.params.lineage[-1] == "selfsup"
    assert "extracted 6 patches" in caplog.text
    assert "wall_clock_s" in out.info


def test_stage3_requires_parent_stage():
    with pytest.raises(StageMismatchError):
        train_stage3(_subject(), _s3(), _ckpt("video-pretrain"))


def test_stage3_small_subject_names_minimum():
    with pytest.raises(ShapeError, match="at least"):
        train_stage3(_subject(size=(8, 8, 16)), _s3(), _ckpt("mr-finetune"))


def test_stage3_subjects_diverge():
    start = _ckpt("mr-finetune", perturb_head(SliceInterpolator(TINY)))
    a = train_stage3(_subject(seed=1), _s3(), start)
    b = train_stage3(_subject("layered_tissue", seed=2), _s3(), start)
    ta, tb = a.params.tensors, b.params.tensors
    assert any(not np.array_equal(ta[k], tb[k]) for k in ta)


@pytest.mark.parametrize("kind", ["sinusoid_z", "layered_tissue"])
def test_stage3_reduces_held_out_error_under_contrast_shift(kind):
    train = [make_phantom_volume(k, (32, 32, 32), seed=10 + i) for k in ("sinusoid_z", "layered_tissue")
             for i in range(2)]
    cfg2 = _s2(epochs=4, iterations_per_epoch=25, batch_size=4, patch_size=(32, 32), patch_slices=8,
               initial_lr=2e-3, allow_stage_mismatch=True)
    sf = train_stage2(train, cfg2, initial_checkpoint(SliceInterpolator(TINY)))
    hr = invert_contrast(make_phantom_volume(kind, (48, 32, 61), seed=50))
    lr = decimate(hr, DegradeSpec("z", 4, "none")).replace(spacing=(1.0, 1.0, 4.0))
    ref = hr_reference_grid(hr, 4).voxels
    held_out = np.arange(ref.shape[2]) % 4 != 0
    cfg3 = StageConfig.defaults("selfsup_finetune", patch_size=(32, 16), patch_slices=8)
    ssf = train_stage3(lr, cfg3, sf)
    before = l1_loss(ref[:, :, held_out], super_resolve(lr, sf.params, 4).voxels[:, :, held_out])
    after = l1_loss(ref[:, :, held_out], super_resolve(lr, ssf.params, 4).voxels[:, :, held_out])
    assert after <= before


def test_same_seed_identical_loss_csv(tmp_path):
    for name in ("a", "b"):
        train_stage1(_videos(), _s1(seed=7), SliceInterpolator(TINY), run_dir=tmp_path / name)
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()


def test_resume_matches_straight_through(tmp_path):
    torch.manual_seed(0)
    model = SliceInterpolator(TINY)
    state = {k: v.clone() for k, v in model.state_dict().items()}
    straight = train_stage1(_videos(), _s1(epochs=4), model, run_dir=tmp_path / "straight")
    model.load_state_dict(state)
    train_stage1(_videos(), _s1(epochs=2), model, run_dir=tmp_path / "part")
    mid = load_checkpoint(tmp_path / "part" / "checkpoints" / "epoch_0002")
    resumed = train_stage1(_videos(), _s1(epochs=4), resume=mid, run_dir=tmp_path / "part")
    assert resumed.final_loss == pytest.approx(straight.final_loss, abs=1e-6)
    straight_rows = (tmp_path / "straight" / "loss.csv").read_text().splitlines()
    resumed_rows = (tmp_path / "part" / "loss.csv").read_text().splitlines()
    assert straight_rows == resumed_rows


def test_resume_rejects_wrong_stage(tmp_path):
    ckpt = train_stage1(_videos(), _s1(epochs=1), SliceInterpolator(TINY))
    with pytest.raises(StageMismatchError):
        train_stage2([make_phantom_volume("sinusoid_z", (16, 16, 16))], _s2(), resume=ckpt)
