"""
Organoid Segmentation Pipeline CLI
One entry point for every stage: synth, prepare, split, pretrain, train, evaluate, scenario, report
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from organoid_config import PipelineConfig, atomic_write_text, load_config, resolve_device, write_resolved_config
from organoid_errors import (
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_VALIDATION,
    IncompleteRuns,
    MissingFile,
    UnknownScenario,
    UnknownSubcommand,
    exit_code_for,
)
from organoid_logging import setup_logging

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("synth", "prepare", "split", "pretrain", "train", "evaluate", "scenario", "report")
ENCODER_ALIASES = {"resnet50": "resnet50", "cnn": "simple_cnn", "simple_cnn": "simple_cnn"}


def _set(overrides: List[str], key: str, value) -> None:
    if value is not None:
        overrides.append(f"{key}={json.dumps(value)}")


def flag_overrides(args: argparse.Namespace) -> List[str]:
    """Subcommand flags expressed as config overrides, applied after --set"""
    overrides: List[str] = []
    command = args.command
    if command == "synth":
        _set(overrides, "synth.n_stacks", args.stacks)
        _set(overrides, "synth.slice_width", args.width)
        _set(overrides, "synth.slice_height", args.height)
        _set(overrides, "synth.n_slices", args.slices)
    elif command == "prepare":
        _set(overrides, "prepare.window", args.window)
        _set(overrides, "prepare.stride", args.stride)
        _set(overrides, "prepare.resize", args.resize)
        _set(overrides, "prepare.min_object_frac", args.min_object_frac)
        _set(overrides, "prepare.format", args.format)
    elif command in ("pretrain", "train"):
        _set(overrides, "pretext.augmentation", args.aug)
        _set(overrides, "pretext.fraction", args.pretext_frac)
        if command == "pretrain":
            _set(overrides, "pretext.loss", args.loss)
        else:
            _set(overrides, "pretext.loss", args.pretext_loss)
            _set(overrides, "main.mode", args.mode)
            _set(overrides, "main.encoder", ENCODER_ALIASES.get(args.encoder) if args.encoder else None)
            _set(overrides, "main.freeze_encoder", True if args.freeze_encoder else None)
            _set(overrides, "main.loss", args.loss)
            _set(overrides, "main.labels", args.labels)
    elif command == "scenario":
        _set(overrides, "scenario.case", args.case)
        _set(overrides, "scenario.parallel_folds", args.parallel_folds)
    elif command == "report":
        _set(overrides, "report.strict", True if args.strict else None)
    return overrides


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workspace", help="Root of data, crops, manifest, runs and report (env ORGANOID_WORKSPACE)")
    common.add_argument("--seed", type=int, help="Seed funnelling all randomness (default 26)")
    common.add_argument("--config", help="Pipeline config JSON")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override one config key, e.g. training.batch_size=8 (repeatable)")
    common.add_argument("--verbose", action="store_true", help="Debug logging and tracebacks")

    parser = argparse.ArgumentParser(
        prog="organoid",
        description="Self-supervised organoid segmentation: data preparation, training, scenarios and reports",
    )
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")

    p = sub.add_parser("synth", parents=[common], help="Generate a synthetic focal-stack dataset")
    p.add_argument("--stacks", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--slices", type=int)

    p = sub.add_parser("prepare", parents=[common], help="Tile, rotate and filter stacks into the crop store")
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--resize", type=int)
    p.add_argument("--min-object-frac", type=float)
    p.add_argument("--format", choices=["raster_dir", "stacked_raster"])

    sub.add_parser("split", parents=[common], help="Assign crops to pretext, main and evaluation splits")

    p = sub.add_parser("pretrain", parents=[common], help="Train (or reuse) a restoration pretext checkpoint")
    p.add_argument("--aug", help="pixel-drop:<fraction>, blur or sobel")
    p.add_argument("--loss", choices=["ssim", "ssim-l1"])
    p.add_argument("--pretext-frac", type=float)

    p = sub.add_parser("train", parents=[common], help="Train a segmentation model over cross-validation folds")
    p.add_argument("--mode", choices=["ssl", "supervised"])
    p.add_argument("--encoder", choices=sorted(ENCODER_ALIASES))
    p.add_argument("--freeze-encoder", action="store_true")
    p.add_argument("--loss", choices=["bce", "dice", "iou"])
    p.add_argument("--labels", type=int)
    p.add_argument("--aug", help="Pretext corruption of the ssl start point")
    p.add_argument("--pretext-loss", choices=["ssim", "ssim-l1"])
    p.add_argument("--pretext-frac", type=float)
    p.add_argument("--fold", type=int, help="Train a single fold instead of all of them")

    p = sub.add_parser("evaluate", parents=[common], help="Score the fold checkpoints of a run directory")
    p.add_argument("--run", required=True, help="Run directory holding fold_<k>/checkpoint")

    p = sub.add_parser("scenario", parents=[common], help="Run every cell and fold of an experiment case")
    p.add_argument("--case", type=int, choices=[1, 2, 3, 4])
    p.add_argument("--parallel-folds", type=int)
    p.add_argument("--dry-run", action="store_true", help="List the planned cells and stop")

    p = sub.add_parser("report", parents=[common], help="Tables, curves and overlays from finished runs")
    p.add_argument("--strict", action="store_true", help="Exit 2 when folds are missing")
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    config_path = args.config
    if args.command == "scenario" and config_path is None and args.case is not None:
        from organoid_scenarios import PRESET_DIR

        preset = PRESET_DIR / f"case{args.case}.json"
        config_path = str(preset) if preset.exists() else None
    return load_config(config_path, [*args.overrides, *flag_overrides(args)], args.workspace, args.seed)


def cmd_synth(cfg: PipelineConfig, args) -> int:
    from organoid_imaging import synthesize_to_disk

    synth = cfg.synth
    written = synthesize_to_disk(
        cfg.data_dir,
        synth.n_stacks,
        (synth.slice_width, synth.slice_height),
        (synth.min_blobs, synth.max_blobs),
        cfg.seed,
        synth.n_slices,
    )
    write_resolved_config(cfg, cfg.data_dir)
    print(f"✅ Synthesised {written['stacks']} stacks ({written['slices']} slices) in {cfg.data_dir}")
    return EXIT_OK


def cmd_prepare(cfg: PipelineConfig, args) -> int:
    from organoid_imaging import prepare_crops

    prep = cfg.prepare
    infos = prepare_crops(cfg.data_dir, cfg.crop_dir, prep.window, prep.stride, prep.resize,
                          prep.min_object_frac, format=prep.format)
    write_resolved_config(cfg, cfg.crop_dir)
    print(f"✅ Prepared {len(infos)} crops in {cfg.crop_dir}")
    return EXIT_OK


def cmd_split(cfg: PipelineConfig, args) -> int:
    from organoid_imaging import read_crop_index
    from organoid_splits import make_splits, write_manifest

    manifest = make_splits(read_crop_index(cfg.crop_dir), cfg.seed, cfg.split.pretext_share, cfg.split.main_share)
    write_manifest(manifest, cfg.manifest_path)
    write_resolved_config(cfg, cfg.root)
    counts = ", ".join(f"{name} {n}" for name, n in manifest.counts().items())
    print(f"✅ Manifest {cfg.manifest_path}: {counts}")
    return EXIT_OK


def _ssl_cell_fields(cfg: PipelineConfig) -> dict:
    return dict(augmentation=cfg.pretext.augmentation, pretext_loss=cfg.pretext.loss,
                pretext_fraction=cfg.pretext.fraction)


def cmd_pretrain(cfg: PipelineConfig, args) -> int:
    from organoid_scenarios import FoldRunner, RunCell

    cell = RunCell(framework="ssl", encoder=cfg.main.encoder, freeze_encoder=True, main_loss=cfg.main.loss,
                   label_budget=cfg.main.labels, **_ssl_cell_fields(cfg))
    bundle = FoldRunner(cfg).pretext(cell)
    print(f"✅ Pretext checkpoint ready: {cell.augmentation} / {cell.pretext_loss} on "
          f"{cell.pretext_fraction:g} of the pretext split (epoch {bundle.meta.epoch})")
    return EXIT_OK


def cmd_train(cfg: PipelineConfig, args) -> int:
    from organoid_scenarios import FoldRunner, RunCell

    main = cfg.main
    extra = _ssl_cell_fields(cfg) if main.mode == "ssl" else {}
    cell = RunCell(framework=main.mode, encoder=main.encoder, freeze_encoder=main.freeze_encoder or main.mode == "ssl",
                   main_loss=main.loss, label_budget=main.labels, **extra)
    runner = FoldRunner(cfg)
    folds = [args.fold] if args.fold is not None else range(runner.grid.folds)
    for fold in folds:
        record = runner(cell, fold)
        print(f"✅ {cell.cell_id} fold {fold}: F1 {record.metrics.f1:.4f} (best epoch {record.best_epoch})")
    print(f"📁 Runs in {runner.run_dir(cell)}")
    return EXIT_OK


def cmd_evaluate(cfg: PipelineConfig, args) -> int:
    from PIL import Image

    from organoid_checkpoint import load_checkpoint
    from organoid_evaluate import aggregate, conventions, evaluate_checkpoint, overlay_samples
    from organoid_report import overlay_panel
    from organoid_splits import read_manifest, split_ids

    run_dir = Path(args.run)
    fold_dirs = sorted(p for p in run_dir.glob("fold_*") if (p / "checkpoint").is_dir())
    if not fold_dirs:
        raise MissingFile(f"no fold checkpoints under {run_dir}")
    manifest = read_manifest(cfg.manifest_path)
    by_id = manifest.by_id()
    infos = [by_id[crop_id] for crop_id in split_ids(manifest, "evaluation")]
    device = resolve_device(cfg.device)
    threshold, aggregation = cfg.evaluate.threshold, cfg.evaluate.aggregation

    records = []
    for fold_dir in fold_dirs:
        fold = int(fold_dir.name.split("_")[1])
        bundle = load_checkpoint(fold_dir / "checkpoint")
        records.append(evaluate_checkpoint(bundle, infos, cfg.crop_dir, fold, threshold, aggregation,
                                           cfg.training.batch_size, device))
        for crop_id, image, true_mask, pred_mask in overlay_samples(bundle, infos, cfg.crop_dir, cfg.evaluate.overlays,
                                                                    threshold, device):
            target = run_dir / "overlays" / f"fold{fold}-{crop_id}.png"
            target.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(overlay_panel(image, true_mask, pred_mask)).save(target)

    stats = aggregate(records)
    payload = {
        "conventions": conventions(threshold, aggregation, len(records)),
        "folds": [record.model_dump(mode="json") for record in records],
        "aggregate": {name: stat.model_dump(mode="json") for name, stat in stats.items()},
    }
    atomic_write_text(run_dir / "evaluation.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    write_resolved_config(cfg, run_dir)
    f1 = stats["f1"]
    print(f"✅ {run_dir.name}: F1 best {f1.best:.4f}, mean {f1.mean:.4f} ± {f1.std:.4f} over {f1.folds} folds")
    return EXIT_OK


def cmd_scenario(cfg: PipelineConfig, args) -> int:
    from organoid_scenarios import ScenarioGrid, plan_scenario, run_scenario
    from organoid_splits import ScenarioConfig

    if cfg.scenario.case is None:
        raise UnknownScenario("scenario needs --case 1|2|3|4 (or scenario.case in the config)")
    scenario = ScenarioConfig.for_case(cfg.scenario.case)
    grid = ScenarioGrid(**cfg.scenario.grid)
    if args.dry_run:
        cells = plan_scenario(scenario, grid)
        for cell in cells:
            print(cell.cell_id)
        print(f"📋 Case {scenario.case}: {len(cells)} cells x {grid.folds} folds")
        return EXIT_OK
    write_resolved_config(cfg, cfg.runs_dir / f"case{scenario.case}")
    records = run_scenario(scenario, grid, cfg, parallel_folds=cfg.scenario.parallel_folds)
    print(f"✅ Case {scenario.case}: {len(records)} fold runs complete")
    return EXIT_OK


def cmd_report(cfg: PipelineConfig, args) -> int:
    from organoid_checkpoint import load_checkpoint
    from organoid_evaluate import overlay_samples
    from organoid_report import build_report
    from organoid_splits import read_manifest, split_ids

    device = resolve_device(cfg.device)
    manifest = None

    def overlays(record):
        nonlocal manifest
        if cfg.evaluate.overlays == 0:
            return []
        if manifest is None:
            manifest = read_manifest(cfg.manifest_path)
        by_id = manifest.by_id()
        infos = [by_id[crop_id] for crop_id in split_ids(manifest, "evaluation")]
        return overlay_samples(load_checkpoint(record.checkpoint), infos, cfg.crop_dir, cfg.evaluate.overlays,
                               cfg.evaluate.threshold, device)

    try:
        written = build_report(cfg, overlay_fn=overlays)
    except IncompleteRuns as e:
        if cfg.report.strict:
            raise
        print(f"⚠️ Report written with gaps: {len(e.missing)} fold run(s) missing (flagged in the tables)")
        return EXIT_OK
    write_resolved_config(cfg, cfg.report_dir)
    print(f"✅ Report in {cfg.report_dir} ({len(written)} files)")
    return EXIT_OK


HANDLERS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "split": cmd_split,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "scenario": cmd_scenario,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    verbose = "--verbose" in argv
    setup_logging("DEBUG" if verbose else None)
    try:
        if argv and not argv[0].startswith("-") and argv[0] not in SUBCOMMANDS:
            raise UnknownSubcommand(f"unknown subcommand '{argv[0]}' (expected one of {', '.join(SUBCOMMANDS)})")
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:
            # argparse already printed usage
            return EXIT_OK if e.code in (0, None) else EXIT_VALIDATION
        if args.command is None:
            parser.print_help()
            raise UnknownSubcommand("no subcommand given")
        cfg = resolve_config(args)
        return HANDLERS[args.command](cfg, args)
    except KeyboardInterrupt:
        print("⚠️ Interrupted")
        return EXIT_RUNTIME
    except Exception as e:
        if verbose:
            logger.exception("Failed")
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
