"""``slicesr`` command-line entry point.

Subcommands: synth, degrade, pretrain, finetune, selfsup, infer, evaluate,
report, schema. Exit codes: 0 success, 1 runtime failure, 2 invalid usage or
configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import tomli

from slicesr import config as cfgmod
from slicesr.config import ConfigError, RunConfig, StageConfig, load_config, resolve_document, stage_schema
from slicesr.core import (
    list_frame_dirs,
    list_volumes,
    load_frame_sequence,
    load_volume,
    resolve_data_path,
    save_frame_sequence,
    save_volume,
    volume_stem,
)
from slicesr.errors import SliceSRError

log = logging.getLogger("slicesr")

SUBCOMMAND_STAGE = {"pretrain": "video_pretrain", "finetune": "mr_finetune", "selfsup": "selfsup_finetune"}


class UsageError(Exception):
    """Invalid invocation; maps to exit code 2."""


def _setup_logging(verbose: bool) -> None:
    root = logging.getLogger()
    if not root.handlers:
        logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    else:
        root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _prepare_run_dir(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"run directory {path} is not empty; choose a new directory or pass --force")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _attach_file_log(run_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(run_dir / "train.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


def _echo_config(run: RunConfig, run_dir: Path) -> None:
    cfgmod.write_config(run, run_dir / "config.toml")
    log.info("stage=%s seed=%d config_hash=%s", run.stage, run.train.seed, run.config_hash())


def _read_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc


def _run_dir_for(args, run: RunConfig) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    if run.run.get("dir"):
        return resolve_data_path(run.run["dir"], root=Path(args.config).parent)
    raise UsageError("no run directory: pass --run-dir or set [run] dir in the config")


def _set_threads(run: RunConfig) -> None:
    import torch

    torch.set_num_threads(int(run.run.get("threads", 1)))


# --- synth -----------------------------------------------------------------

def cmd_synth(args) -> int:
    from slicesr.synth import make_phantom_volume, make_video

    out = Path(args.out)
    if args.what == "video":
        for i in range(args.count):
            seq = make_video(args.kind, args.frames, tuple(args.size), seed=args.seed + i)
            target = out / f"{args.kind}_{args.seed + i:04d}" if args.count > 1 else out
            save_frame_sequence(seq, target)
            log.info("wrote %d frames to %s", len(seq), target)
    else:
        for i in range(args.count):
            vol = make_phantom_volume(args.kind, tuple(args.size), tuple(args.spacing), seed=args.seed + i)
            if args.count > 1:
                target = out / f"{args.kind}_{args.seed + i:04d}{args.suffix}"
            else:
                target = out
            save_volume(vol, target)
            log.info("wrote volume %s %s to %s", vol.shape, vol.spacing, target)
    return 0


# --- degrade ---------------------------------------------------------------

def cmd_degrade(args) -> int:
    from slicesr.degrade import DegradeSpec, decimate

    vol = load_volume(args.inp)
    out = decimate(vol, DegradeSpec(args.axis, args.factor, args.profile, args.fwhm))
    save_volume(out, args.out)
    log.info("%s %s -> %s spacing %s", args.inp, vol.shape, out.shape, out.spacing)
    return 0


# --- training --------------------------------------------------------------

def _load_run_config(args, stage: str) -> RunConfig:
    doc = _read_toml(args.config)
    return resolve_document(doc, stage)


def _data_path(run: RunConfig, key: str, base: Path) -> Path:
    return resolve_data_path(run.data[key], root=None if "SLICESR_DATA_ROOT" in os.environ else base)


def cmd_train(args) -> int:
    from slicesr.model import SliceInterpolator
    from slicesr.train import load_checkpoint, train_stage1, train_stage2, train_stage3

    stage = SUBCOMMAND_STAGE[args.command]
    run = _load_run_config(args, stage)
    if args.seed is not None:
        run.train.seed = args.seed
    base = Path(args.config).resolve().parent
    run_dir = _prepare_run_dir(_run_dir_for(args, run), args.force)
    handler = _attach_file_log(run_dir)
    try:
        _set_threads(run)
        _echo_config(run, run_dir)
        cfg = run.train
        resume = load_checkpoint(_data_path(run, "resume", base)) if run.data.get("resume") else None
        if stage == "video_pretrain":
            roots = list_frame_dirs(_data_path(run, "video_root", base))
            seqs = [load_frame_sequence(d, cfg.frame_size) for d in roots]
            log.info("loaded %d sequences", len(seqs))
            model = None
            if run.data.get("init_checkpoint"):
                model = load_checkpoint(_data_path(run, "init_checkpoint", base)).build_model()
            elif resume is None:
                model = SliceInterpolator(run.model)
            ckpt = train_stage1(seqs, cfg, model, run_dir, resume)
        elif stage == "mr_finetune":
            start = load_checkpoint(_data_path(run, "checkpoint", base))
            train = [load_volume(p) for p in list_volumes(_data_path(run, "train_dir", base))]
            val = ([load_volume(p) for p in list_volumes(_data_path(run, "val_dir", base))]
                   if run.data.get("val_dir") else None)
            log.info("loaded %d training and %d validation volumes", len(train), len(val or []))
            ckpt = train_stage2(train, cfg, start, val, run_dir, resume)
        else:
            start = load_checkpoint(_data_path(run, "checkpoint", base))
            subject = load_volume(_data_path(run, "subject", base))
            ckpt = train_stage3(subject, cfg, start, run_dir, resume)
            log.info("self-supervised fine-tuning: %d patches, %d epochs, %.1fs wall clock",
                     ckpt.info.get("patches", 0), ckpt.info.get("epochs_run", 0), ckpt.info.get("wall_clock_s", 0.0))
        log.info("final loss %.6f; checkpoint %s", ckpt.final_loss, ckpt.path)
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()
    return 0


# --- infer -----------------------------------------------------------------

def _selfsup_run_config(args) -> RunConfig:
    doc = _read_toml(args.selfsup_config) if args.selfsup_config else {}
    data = doc.setdefault("data", {})
    data.setdefault("subject", str(args.inp))
    data.setdefault("checkpoint", str(args.params))
    return resolve_document(doc, "selfsup_finetune")


def cmd_infer(args) -> int:
    from slicesr.infer import super_resolve, super_resolve_continuous, trilinear_continuous, trilinear_upsample
    from slicesr.train import load_checkpoint, train_stage3

    if args.factor is None and args.target_spacing is None:
        raise UsageError("infer needs --factor or --target-spacing")
    if args.baseline is None and args.params is None:
        raise UsageError("infer needs --params unless --baseline is given")
    lr = load_volume(args.inp)
    started = time.perf_counter()
    lineage: list[str] = []
    if args.baseline == "trilinear":
        out = (trilinear_upsample(lr, args.factor) if args.factor is not None
               else trilinear_continuous(lr, args.target_spacing))
        method = "trilinear"
    else:
        ckpt = load_checkpoint(args.params)
        if args.selfsup:
            run = _selfsup_run_config(args)
            run_dir = None
            if args.selfsup_run_dir:
                run_dir = _prepare_run_dir(Path(args.selfsup_run_dir), args.force)
                _echo_config(run, run_dir)
            ckpt = train_stage3(lr, run.train, ckpt, run_dir)
        params = ckpt.params
        lineage = list(params.lineage)
        tile = None if args.tile == 0 else args.tile
        if args.factor is not None:
            out = super_resolve(lr, params, args.factor, tile, args.overlap)
        else:
            out = super_resolve_continuous(lr, params, args.target_spacing, tile, args.overlap)
        method = "model"
    elapsed = time.perf_counter() - started
    save_volume(out, args.out)
    sidecar = {
        "input": str(args.inp),
        "params": None if args.params is None else str(args.params),
        "method": method,
        "lineage": lineage,
        "factor": args.factor,
        "target_spacing": args.target_spacing,
        "output_shape": list(out.shape),
        "output_spacing": list(out.spacing),
        "runtime_s": elapsed,
    }
    Path(str(args.out) + ".json").write_text(json.dumps(sidecar, indent=2))
    log.info("wrote %s %s spacing %s in %.2fs", args.out, out.shape, out.spacing, elapsed)
    return 0


# --- evaluate / report -------------------------------------------------------

def _match_reference(ref, test):
    """Crop the reference along z when the test grid covers only its leading slices."""
    if ref.shape[:2] == test.shape[:2] and test.shape[2] < ref.shape[2]:
        return ref.replace(voxels=ref.voxels[:, :, : test.shape[2]])
    return ref


def cmd_evaluate(args) -> int:
    from slicesr.metrics import evaluate_pair, MetricReport, write_error_maps

    refs = {volume_stem(p): p for p in list_volumes(args.ref_dir)}
    tests = {volume_stem(p): p for p in list_volumes(args.test_dir)}
    common = sorted(set(refs) & set(tests))
    if not common:
        raise SliceSRError(f"no matching volume names between {args.ref_dir} and {args.test_dir}")
    for missing in sorted(set(refs) ^ set(tests)):
        log.warning("subject %s present in only one directory; skipped", missing)
    rows, lineages = [], set()
    for sid in common:
        ref, test = load_volume(refs[sid]), load_volume(tests[sid])
        ref = _match_reference(ref, test)
        row = evaluate_pair(sid, ref, test)
        rows.append(row)
        if not row.valid:
            log.warning("subject %s failed: %s", sid, row.error)
        elif args.error_maps:
            write_error_maps(ref, test, Path(args.error_maps), prefix=sid)
        sidecar = Path(str(tests[sid]) + ".json")
        if sidecar.is_file():
            lineages.add(tuple(json.loads(sidecar.read_text()).get("lineage", [])))
    report = MetricReport(rows)
    report.to_csv(args.out_csv)
    summary = {**report.summary(), "lineage": list(lineages.pop()) if len(lineages) == 1 else None}
    Path(args.out_csv).with_suffix(".json").write_text(json.dumps(summary, indent=2))
    if args.report_md:
        Path(args.report_md).write_text(report.to_markdown(Path(args.test_dir).name))
    log.info("PSNR %.3f ± %.3f dB, SSIM %.4f ± %.4f over %d subject(s)",
             report.psnr_mean, report.psnr_sd, report.ssim_mean, report.ssim_sd, len(report.valid_rows))
    return 0


def _metrics_csv(run: Path) -> Path:
    if run.is_dir():
        candidates = sorted(run.glob("*.csv"))
        if not candidates:
            raise SliceSRError(f"no metrics CSV in {run}")
        return run / "metrics.csv" if (run / "metrics.csv").is_file() else candidates[0]
    return run


def _lineage_flags(csv_path: Path) -> dict:
    summary = csv_path.with_suffix(".json")
    lineage = json.loads(summary.read_text()).get("lineage") if summary.is_file() else None
    if lineage is None:
        raise SliceSRError(f"{csv_path}: no lineage recorded in {summary.name}; cannot place it in an ablation table")
    return {"VP": "video-pretrain" in lineage, "SF": "mr-finetune" in lineage, "SSF": "selfsup" in lineage}


def cmd_report(args) -> int:
    from slicesr.metrics import MetricReport, ablation_markdown, table_markdown

    if not (args.ablation or args.table or args.figure_ref):
        raise UsageError("report needs --ablation, --table or --figure-ref")
    parts = []
    if args.table:
        rows = []
        for spec in args.table:
            name, _, path = spec.partition("=")
            if not path:
                raise UsageError(f"--table entries must be NAME=PATH, got {spec!r}")
            rows.append((name, MetricReport.from_csv(_metrics_csv(Path(path)))))
        parts.append(table_markdown(rows, "Quantitative results per method"))
    if args.ablation:
        rows = []
        for run in args.ablation:
            csv_path = _metrics_csv(Path(run))
            rows.append((_lineage_flags(csv_path), MetricReport.from_csv(csv_path)))
        order = lambda r: (r[0]["VP"], r[0]["SSF"], r[0]["SF"])  # noqa: E731
        parts.append(ablation_markdown(sorted(rows, key=order),
                                       "Ablation: VP = video pre-training, SF = supervised fine-tuning, "
                                       "SSF = self-supervised fine-tuning"))
    if args.figure_ref:
        from slicesr.report import error_map_figure

        tests = []
        for spec in args.figure_test:
            name, _, path = spec.partition("=")
            tests.append((name, load_volume(path)))
        if not tests:
            raise UsageError("--figure-ref needs at least one --figure-test NAME=VOLUME")
        png = Path(args.figure_out)
        ref = _match_reference(load_volume(args.figure_ref), tests[0][1])
        error_map_figure(ref, tests, png, args.figure_slice, args.figure_axis)
        parts.append(f"![Qualitative results and error maps]({png.name})\n")
    text = "\n".join(parts)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_schema(args) -> int:
    stage = SUBCOMMAND_STAGE.get(args.stage, args.stage)
    if stage not in cfgmod.STAGES:
        raise UsageError(f"unknown stage {args.stage!r}")
    sys.stdout.write(json.dumps(stage_schema(stage), indent=2) + "\n")
    return 0


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from slicesr.synth import PHANTOM_KINDS, VIDEO_KINDS

    parser = argparse.ArgumentParser(prog="slicesr", description="Inter-slice super-resolution toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic videos or phantom volumes")
    synth_sub = p.add_subparsers(dest="what", required=True)
    pv = synth_sub.add_parser("video")
    pv.add_argument("--kind", choices=VIDEO_KINDS, default="moving_blob")
    pv.add_argument("--frames", type=int, default=61)
    pv.add_argument("--size", type=int, nargs=2, default=(90, 160), metavar=("H", "W"))
    pv.add_argument("--seed", type=int, default=0)
    pv.add_argument("--count", type=int, default=1)
    pv.add_argument("--out", required=True)
    pp = synth_sub.add_parser("volume")
    pp.add_argument("--kind", choices=PHANTOM_KINDS, default="layered_tissue")
    pp.add_argument("--size", type=int, nargs=3, default=(64, 64, 64), metavar=("X", "Y", "Z"))
    pp.add_argument("--spacing", type=float, nargs=3, default=(1.0, 1.0, 1.0), metavar=("SX", "SY", "SZ"))
    pp.add_argument("--seed", type=int, default=0)
    pp.add_argument("--count", type=int, default=1)
    pp.add_argument("--suffix", default=".nii.gz", help="file suffix when --count > 1")
    pp.add_argument("--out", required=True)

    p = sub.add_parser("degrade", help="decimate a volume along one axis")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.add_argument("--factor", type=int, default=4)
    p.add_argument("--profile", choices=("none", "gaussian"), default="none")
    p.add_argument("--fwhm", type=float, default=None, help="slice-profile FWHM in mm (default: output spacing)")

    for name, help_text in (("pretrain", "stage 1: video frame interpolation"),
                            ("finetune", "stage 2: supervised MR fine-tuning"),
                            ("selfsup", "stage 3: subject self-supervised fine-tuning")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True)
        p.add_argument("--run-dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty run directory")

    p = sub.add_parser("infer", help="super-resolve one LR volume")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--params", help="parameter archive, checkpoint directory or run directory")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--factor", type=int)
    group.add_argument("--target-spacing", type=float)
    p.add_argument("--tile", type=int, default=256, help="tile size in pixels; 0 disables tiling")
    p.add_argument("--overlap", type=int, default=16)
    p.add_argument("--baseline", choices=("trilinear",))
    sel = p.add_mutually_exclusive_group()
    sel.add_argument("--selfsup", dest="selfsup", action="store_true",
                     help="fine-tune on the input subject before inference")
    sel.add_argument("--no-selfsup", dest="selfsup", action="store_false")
    p.set_defaults(selfsup=False)
    p.add_argument("--selfsup-config", help="TOML with [train] overrides for --selfsup")
    p.add_argument("--selfsup-run-dir", help="where --selfsup writes its checkpoints")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("evaluate", help="PSNR/SSIM of test volumes against references")
    p.add_argument("--ref-dir", required=True)
    p.add_argument("--test-dir", required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--report-md")
    p.add_argument("--error-maps", help="directory for per-subject error-map PNGs")

    p = sub.add_parser("report", help="render result tables and error-map figures")
    p.add_argument("--ablation", nargs="+", metavar="RUN", help="evaluation CSVs or directories")
    p.add_argument("--table", nargs="+", metavar="NAME=CSV")
    p.add_argument("--figure-ref")
    p.add_argument("--figure-test", nargs="*", default=[], metavar="NAME=VOLUME")
    p.add_argument("--figure-slice", type=int)
    p.add_argument("--figure-axis", choices=("x", "y", "z"), default="x")
    p.add_argument("--figure-out", default="error_maps.png")
    p.add_argument("--out", help="Markdown output (default: stdout)")

    p = sub.add_parser("schema", help="print the JSON schema of a training config")
    p.add_argument("stage", help="pretrain | finetune | selfsup")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "degrade": cmd_degrade,
    "pretrain": cmd_train,
    "finetune": cmd_train,
    "selfsup": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "schema": cmd_schema,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (SliceSRError, OSError, ValueError) as exc:
        bare = isinstance(exc, OSError) and not exc.strerror
        log.error("%s", f"{type(exc).__name__}: {exc}" if bare else exc)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
