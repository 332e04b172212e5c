import csv
import json

import numpy as np
import pytest
import tomli_w

from slicesr.cli import run
from slicesr.core import load_volume
from slicesr.model import load_params

from conftest import TINY


def _write(path, doc):
    path.write_text(tomli_w.dumps(doc))
    return path


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Synthetic data plus tiny stage-1 and stage-2 runs shared by the CLI tests."""
    w = tmp_path_factory.mktemp("cli")
    assert run(["synth", "video", "--kind", "moving_blob", "--frames", "61", "--size", "24", "32",
                "--count", "2", "--out", str(w / "videos")]) == 0
    assert run(["synth", "volume", "--kind", "layered_tissue", "--size", "24", "24", "24", "--count", "2",
                "--out", str(w / "hr_train")]) == 0
    assert run(["synth", "volume", "--kind", "sinusoid_z", "--size", "32", "24", "33", "--seed", "4",
                "--out", str(w / "hr_test" / "subj.nii.gz")]) == 0
    assert run(["degrade", "--in", str(w / "hr_test" / "subj.nii.gz"), "--out", str(w / "lr" / "subj.nii.gz"),
                "--axis", "z", "--factor", "4"]) == 0
    model = TINY.to_dict()
    _write(w / "s1.toml", {"data": {"video_root": "videos"}, "model": model,
                           "train": {"epochs": 2, "iterations_per_epoch": 3, "batch_size": 2,
                                     "patch_size": [16, 16], "frame_size": [24, 32]}})
    _write(w / "s2.toml", {"data": {"train_dir": "hr_train", "checkpoint": "runs/s1"},
                           "train": {"epochs": 1, "iterations_per_epoch": 3, "batch_size": 2,
                                     "patch_size": [16, 16], "patch_slices": 4}})
    _write(w / "s3.toml", {"data": {"subject": "lr/subj.nii.gz", "checkpoint": "runs/s2"},
                           "train": {"epochs": 2, "patches_per_subject": 4, "batch_size": 2,
                                     "patch_size": [16, 8], "patch_slices": 4}})
    assert run(["pretrain", "--config", str(w / "s1.toml"), "--run-dir", str(w / "runs" / "s1")]) == 0
    assert run(["finetune", "--config", str(w / "s2.toml"), "--run-dir", str(w / "runs" / "s2")]) == 0
    return w


def test_pretrain_run_directory(work):
    rd = work / "runs" / "s1"
    for name in ("config.toml", "loss.csv", "manifest.json", "train.log", "final/params.srp"):
        assert (rd / name).exists(), name
    with open(rd / "loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    log = (rd / "train.log").read_text()
    assert "seed=0" in log and "config_hash=" in log
    # the echoed config carries defaults and re-validates
    echoed = (rd / "config.toml").read_text()
    assert "lr_halving_period" in echoed and "adam_betas" in echoed
    assert load_params(rd / "final" / "params.srp").stage == "video-pretrain"


def test_echoed_config_reproduces_run(work, tmp_path):
    rd = work / "runs" / "s1"
    again = tmp_path / "again"
    doc = (rd / "config.toml").read_text().replace('video_root = "videos"',
                                                   f'video_root = "{work / "videos"}"')
    (tmp_path / "echo.toml").write_text(doc)
    assert run(["pretrain", "--config", str(tmp_path / "echo.toml"), "--run-dir", str(again)]) == 0
    assert (again / "loss.csv").read_bytes() == (rd / "loss.csv").read_bytes()


def test_run_dir_is_append_only(work):
    args = ["pretrain", "--config", str(work / "s1.toml"), "--run-dir", str(work / "runs" / "s1")]
    assert run(args) == 2


def test_invalid_config_exit_2(tmp_path, capsys):
    _write(tmp_path / "bad.toml", {"data": {"video_root": "v"}, "train": {"epochs": 0}})
    assert run(["pretrain", "--config", str(tmp_path / "bad.toml"), "--run-dir", str(tmp_path / "r")]) == 2
    assert "train.epochs" in capsys.readouterr().err


def test_missing_required_flag_exit_2():
    assert run(["infer", "--out", "x.nii.gz", "--factor", "4"]) == 2


def test_unknown_flag_exit_2():
    assert run(["synth", "volume", "--out", "x", "--bogus"]) == 2


def test_missing_input_exit_1(tmp_path):
    assert run(["degrade", "--in", str(tmp_path / "none.nii.gz"), "--out", str(tmp_path / "o.nii.gz")]) == 1


def test_infer_and_evaluate(work, tmp_path):
    lr = str(work / "lr" / "subj.nii.gz")
    out = tmp_path / "sr" / "subj.nii.gz"
    assert run(["infer", "--in", lr, "--out", str(out), "--params", str(work / "runs" / "s2"),
                "--factor", "4"]) == 0
    vol = load_volume(out)
    assert vol.shape == (32, 24, 33) and vol.spacing[2] == pytest.approx(1.0)
    sidecar = json.loads((tmp_path / "sr" / "subj.nii.gz.json").read_text())
    assert sidecar["lineage"] == ["video-pretrain", "mr-finetune"]
    csv_path = tmp_path / "eval" / "m.csv"
    assert run(["evaluate", "--ref-dir", str(work / "hr_test"), "--test-dir", str(tmp_path / "sr"),
                "--out-csv", str(csv_path), "--error-maps", str(tmp_path / "maps")]) == 0
    summary = json.loads(csv_path.with_suffix(".json").read_text())
    assert summary["n"] == 1 and summary["psnr_mean"] > 20
    assert list((tmp_path / "maps").glob("*.png"))


def test_continuous_and_baseline(work, tmp_path):
    lr = str(work / "lr" / "subj.nii.gz")
    out = tmp_path / "tri.nii.gz"
    assert run(["infer", "--in", lr, "--out", str(out), "--baseline", "trilinear", "--target-spacing", "2"]) == 0
    assert load_volume(out).shape[2] == 17


def test_infer_selfsup_equals_two_steps(work, tmp_path):
    lr = str(work / "lr" / "subj.nii.gz")
    params = str(work / "runs" / "s2")
    assert run(["selfsup", "--config", str(work / "s3.toml"), "--run-dir", str(tmp_path / "s3")]) == 0
    assert "extracted 4 patches" in (tmp_path / "s3" / "train.log").read_text()
    assert run(["infer", "--in", lr, "--out", str(tmp_path / "a.nii.gz"), "--params", str(tmp_path / "s3"),
                "--factor", "4"]) == 0
    _write(tmp_path / "over.toml", {"train": {"epochs": 2, "patches_per_subject": 4, "batch_size": 2,
                                              "patch_size": [16, 8], "patch_slices": 4}})
    assert run(["infer", "--in", lr, "--out", str(tmp_path / "b.nii.gz"), "--params", params, "--factor", "4",
                "--selfsup", "--selfsup-config", str(tmp_path / "over.toml")]) == 0
    a, b = load_volume(tmp_path / "a.nii.gz"), load_volume(tmp_path / "b.nii.gz")
    np.testing.assert_array_equal(a.voxels, b.voxels)


def test_report_ablation_and_figure(work, tmp_path):
    lr = str(work / "lr" / "subj.nii.gz")
    runs = {}
    for name, params in (("sf", work / "runs" / "s2"), ("tri", None)):
        out = tmp_path / name / "subj.nii.gz"
        extra = ["--params", str(params)] if params else ["--baseline", "trilinear"]
        assert run(["infer", "--in", lr, "--out", str(out), "--factor", "4", *extra]) == 0
        runs[name] = tmp_path / "eval" / f"{name}.csv"
        assert run(["evaluate", "--ref-dir", str(work / "hr_test"), "--test-dir", str(tmp_path / name),
                    "--out-csv", str(runs[name])]) == 0
    md = tmp_path / "report.md"
    assert run(["report", "--ablation", str(runs["sf"]), "--table", f"Trilinear={runs['tri']}",
                f"VP+SF={runs['sf']}", "--figure-ref", str(work / "hr_test" / "subj.nii.gz"),
                "--figure-test", f"VP+SF={tmp_path / 'sf' / 'subj.nii.gz'}",
                "--figure-out", str(tmp_path / "fig.png"), "--out", str(md)]) == 0
    text = md.read_text()
    assert "| VP | SF | SSF |" in text and "| ✓ | ✓ |  |" in text
    assert "| Trilinear |" in text
    assert (tmp_path / "fig.png").is_file()
    # without the evaluation summary there is no lineage to place the row
    runs["tri"].with_suffix(".json").unlink()
    assert run(["report", "--ablation", str(runs["tri"])]) == 1


def test_schema_command(capsys):
    assert run(["schema", "selfsup"]) == 0
    schema = json.loads(capsys.readouterr().out)
    assert schema["properties"]["data"]["required"] == ["subject", "checkpoint"]
    assert run(["schema", "nope"]) == 2
