#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
aesthetics_cli.py
Command line for mcaesthetics: ingest AVA metadata, preview input variants,
train, evaluate, predict, compare reports and port ImageNet weights.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every command writes its log, resolved config and outputs under
runs/<UTC timestamp>-<config fingerprint>/.
"""

import argparse
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from dotenv import load_dotenv
from pathvalidate import sanitize_filename
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table
from rich.text import Text

# Allow running as a script from a source checkout
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from __init__ import __version__  # noqa: E402
from config import config  # noqa: E402
from exceptions import (EXIT_OK, InsufficientSeparationError, InvalidInputError, ReportError,  # noqa: E402
                        handle_exception)
from logging_config import StructuredLogger, setup_logging  # noqa: E402
from models import RATINGS, BackboneKind, Split, TrainReport  # noqa: E402
from services import geometry, saliency  # noqa: E402
from services.ava_ingest import (SUMMARY_TOTAL, ingest, mean_score_by_rating, read_manifest,  # noqa: E402
                                 records_in_split, summarize_by_rating, write_manifest)
from services.backbones import (backbone_spec, ensure_pretrained_weights, port_torchvision_weights,  # noqa: E402
                                ported_weights_path)
from services.multicolumn import assemble, standard_configs, warm_start  # noqa: E402
from services.train import (REFERENCE_RESULTS, comparison_rows, evaluate, load_checkpoint,  # noqa: E402
                            predict, restore_model, run_training)
from utils import derive_seed, seed_everything  # noqa: E402

logger = StructuredLogger(__name__)
console = Console(highlight=False)
err_console = Console(stderr=True, highlight=False)


# ==============================================================================
# SECTION 1 : Argument parsing
# ==============================================================================

class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors as exceptions instead of exiting with 2."""

    def error(self, message):
        raise InvalidInputError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mcaesthetics", description="Multi-column CNN image aesthetics assessment")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, default=None, help="Global seed (config SEED)")
    parser.add_argument("--profile", choices=["PAPER", "DESK", "paper", "desk"], default=None,
                        help="Profile preset applied on top of the defaults")
    parser.add_argument("--config", type=Path, default=None, help="YAML config file")
    parser.add_argument("--runs-dir", type=Path, default=None, help="Parent directory of run directories")
    parser.add_argument("--log-level", default=None, help="Console log level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="Parse metadata, label, split and write a manifest")
    p.add_argument("metadata", type=Path)
    p.add_argument("--images", type=Path, default=None, help="Directory holding <id><extension> files")
    p.add_argument("--out", type=Path, default=None, help="Manifest path (default: <run>/manifest.tsv)")
    p.add_argument("--ratios", type=float, nargs=3, default=None, metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--extension", default=None)
    p.add_argument("--strict", action="store_true", help="Fail when image files are missing")

    p = sub.add_parser("preview", help="Write every input variant of an image")
    p.add_argument("image", type=Path)
    p.add_argument("--out", type=Path, default=None, help="Output directory (default: <run>/preview)")
    p.add_argument("--saliency", action=argparse.BooleanOptionalAction, default=True,
                   help="Also write both saliency maps")

    p = sub.add_parser("train", help="Run the staged schedule on a manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--columns", type=int, choices=[1, 2, 3], default=None)
    p.add_argument("--backbone", choices=["alexnet", "vgg19", "tiny"], default=None)
    p.add_argument("--weights", type=Path, default=None, help="Pretrained convolution weights")
    p.add_argument("--warm-start", type=Path, action="append", default=[],
                   help="Donor checkpoint (repeat, in column order)")
    p.add_argument("--resume", type=Path, default=None, help="Run directory to resume")

    p = sub.add_parser("eval", help="Accuracy of a checkpoint on a manifest split")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("manifest", type=Path)
    p.add_argument("--split", choices=[s.value for s in Split if s is not Split.NONE], default="TEST")

    p = sub.add_parser("predict", help="Label and confidence for one image")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("image", type=Path)
    p.add_argument("--average", action="store_true", help="Average over every variant combination")

    p = sub.add_parser("report", help="Compare training reports with published results")
    p.add_argument("reports", type=Path, nargs="*")
    p.add_argument("--reference", action="store_true", help="Also show the published architecture table")
    p.add_argument("--manifest", type=Path, default=None, help="Print the rating summary of a manifest")

    p = sub.add_parser("weights", help="Port torchvision's ImageNet weights to block naming")
    p.add_argument("--backbone", choices=["alexnet", "vgg19"], default=None)
    p.add_argument("--out", type=Path, default=None, help="Weights path (default: <cache>/<backbone>_imagenet.pt)")
    return parser


# ==============================================================================
# SECTION 2 : Configuration and run directories
# ==============================================================================

def _configure(args: argparse.Namespace) -> None:
    """Resolve defaults < profile < file < environment < flags."""
    config.reset(profile=args.profile, load_from_env=False)
    resume_config = getattr(args, "resume", None)
    if resume_config is not None and (resume_config / "config.yaml").is_file():
        config.load_file(resume_config / "config.yaml")
    if args.config is not None:
        config.load_file(args.config)
    config.load_from_env()

    overrides: Dict[str, object] = {}
    if args.seed is not None:
        overrides["SEED"] = args.seed
    if args.runs_dir is not None:
        overrides["RUNS_DIR"] = str(args.runs_dir)
    if args.log_level is not None:
        overrides["LOG_LEVEL_CONSOLE"] = args.log_level
    if args.command in ("train", "weights") and args.backbone is not None:
        overrides["BACKBONE"] = args.backbone
    if args.command == "train":
        if args.columns is not None:
            overrides["COLUMNS"] = args.columns
        if args.weights is not None:
            overrides["WEIGHTS_PATH"] = str(args.weights)
    config.apply_overrides(overrides)


def _new_run_dir(command: str) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    base = Path(config.RUNS_DIR)
    name = sanitize_filename(f"{stamp}-{config.fingerprint()}-{command}")
    run_dir, counter = base / name, 1
    while run_dir.exists():
        run_dir = base / f"{name}-{counter}"
        counter += 1
    run_dir.mkdir(parents=True)
    return run_dir


def _weights_cache_dir() -> Path:
    return Path(config.WEIGHTS_CACHE_DIR or Path(config.RUNS_DIR) / "weights")


def _open_run(args: argparse.Namespace) -> Path:
    run_dir = args.resume if getattr(args, "resume", None) is not None else _new_run_dir(args.command)
    run_dir.mkdir(parents=True, exist_ok=True)
    setup_logging(log_level_console=config.LOG_LEVEL_CONSOLE, log_level_file=config.LOG_LEVEL_FILE,
                  structured=config.LOG_STRUCTURED, log_file=run_dir / config.LOG_FILE,
                  context={"run_dir": str(run_dir), "fingerprint": config.fingerprint(), "command": args.command})
    config.dump(run_dir / "config.yaml")
    logger.info(f"Command '{args.command}' started", profile=config.PROFILE, seed=config.SEED)
    return run_dir


# ==============================================================================
# SECTION 3 : Rendering
# ==============================================================================

def _fmt(value: Optional[float], digits: int = 4) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def _rating_table(summary: Dict, mean_scores: Dict) -> Table:
    table = Table(title="Images per mode rating", show_header=True, header_style="bold magenta",
                  border_style="dim")
    table.add_column("Rating", style="cyan", justify="right")
    table.add_column("Images", style="green", justify="right")
    table.add_column("Mean score", justify="right")
    for rating in RATINGS:
        table.add_row(str(rating), f"{summary.get(rating, 0):,}", _fmt(mean_scores.get(rating), 2))
    table.add_row(Text("TOTAL", style="bold"), Text(f"{summary.get(SUMMARY_TOTAL, 0):,}", style="bold green"),
                  Text(_fmt(mean_scores.get(SUMMARY_TOTAL), 2), style="bold"))
    return table


def _results_table(reports: Sequence[TrainReport], reference: bool = False) -> Table:
    table = Table(title="Architectures and networks", show_header=True, header_style="bold magenta",
                  border_style="dim")
    table.add_column("Architecture", style="cyan")
    table.add_column("Network")
    table.add_column("Train accuracy", justify="right")
    table.add_column("Test Accuracy", justify="right")
    table.add_column("Source", style="dim")
    for report in reports:
        table.add_row(report.architecture, report.network, _fmt(report.train_accuracy),
                      _fmt(report.test_accuracy), f"run {report.fingerprint} ({report.status})")
    if reference:
        for row in REFERENCE_RESULTS:
            table.add_row(row.architecture, row.network, _fmt(row.train_accuracy), _fmt(row.test_accuracy),
                          "published")
    return table


def _comparison_table(reports: Sequence[TrainReport]) -> Table:
    table = Table(title="Comparison on AVA", show_header=True, header_style="bold magenta", border_style="dim")
    table.add_column("Method", style="cyan")
    table.add_column("Accuracy (%)", justify="right")
    table.add_column("Source", style="dim")
    for name, accuracy, source in comparison_rows(reports):
        table.add_row(name, f"{accuracy:.2f}", source)
    return table


# ==============================================================================
# SECTION 4 : Commands
# ==============================================================================

def cmd_ingest(args: argparse.Namespace, run_dir: Path) -> int:
    result = ingest(args.metadata, images_dir=args.images, ratios=args.ratios, seed=config.SEED,
                    strict=args.strict, extension=args.extension)
    out = write_manifest(result.records, args.out or run_dir / "manifest.tsv")
    console.print(_rating_table(result.summary, result.mean_scores))
    console.print(f"Manifest: [cyan]{out}[/] ({len(result.records)} records, {len(result.errors)} line errors, "
                  f"{len(result.missing)} missing images)")
    return EXIT_OK


def cmd_preview(args: argparse.Namespace, run_dir: Path) -> int:
    image = geometry.load_image(args.image)
    out_dir = args.out or run_dir / "preview"
    out_dir.mkdir(parents=True, exist_ok=True)
    record_id = sanitize_filename(args.image.stem) or "image"
    upscaled = geometry.upscale_to_min(image)
    w, h = geometry.image_size(image)
    uw, uh = geometry.image_size(upscaled)

    geometry.save_image(geometry.resize_to(image), out_dir / "original.png")
    geometry.save_image(geometry.resize_to(geometry.pad_to_square(image)), out_dir / "padded.png")
    center, center_spec = geometry.center_crop(upscaled)
    geometry.save_image(center, out_dir / "center.png")

    requested = int(config.RANDOM_CROP_COUNT)
    try:
        crops = geometry.random_crops(upscaled, seed=derive_seed(config.SEED, record_id))
        status = "ok"
    except InsufficientSeparationError as e:
        crops, status = e.crops, "insufficient-separation"
    for i, spec in enumerate(crops, start=1):
        geometry.save_image(geometry.apply_crop(upscaled, spec), out_dir / f"random_{i}.png")

    if args.saliency:
        base = geometry.resize_to(image)
        geometry.save_image(geometry.to_uint8_plane(saliency.spectral_residual(base)),
                            out_dir / "saliency_spectral.png")
        geometry.save_image(geometry.to_uint8_plane(saliency.fine_grained(base)), out_dir / "saliency_fine.png")

    lines = [
        f"source {w} {h}",
        f"cropped_from {uw} {uh}",
        "center {} {} {} {}".format(*center_spec.as_tuple()),
        *("random_{} {} {} {} {}".format(i, *s.as_tuple()) for i, s in enumerate(crops, start=1)),
        f"random_crops placed={len(crops)} requested={requested} min_sep={config.RANDOM_CROP_MIN_SEP} "
        f"status={status}",
    ]
    (out_dir / "crops.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    console.print(f"Preview written to [cyan]{out_dir}[/] ({len(crops)}/{requested} random crops, {status})")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, run_dir: Path) -> int:
    records = read_manifest(args.manifest)
    train_records = records_in_split(records, Split.TRAIN)
    test_records = records_in_split(records, Split.TEST)

    seed_everything(config.SEED)
    spec = ensure_pretrained_weights(backbone_spec(), _weights_cache_dir())
    configs, fusion = standard_configs(int(config.COLUMNS), spec)
    model = assemble(configs, fusion)
    if args.warm_start:
        warm_start(model, [restore_model(load_checkpoint(p)) for p in args.warm_start])

    report = run_training(model, train_records, test_records, run_dir=run_dir,
                          resume=args.resume is not None, seed=config.SEED)
    console.print(_results_table([report]))
    console.print(f"Report: [cyan]{run_dir / 'report.json'}[/]")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, run_dir: Path) -> int:
    model = restore_model(load_checkpoint(args.checkpoint))
    records = records_in_split(read_manifest(args.manifest), args.split)
    accuracy = evaluate(model, records, seed=config.SEED)
    result = {"checkpoint": str(args.checkpoint), "split": args.split, "records": len(records),
              "accuracy": accuracy, "fingerprint": config.fingerprint()}
    (run_dir / "eval.json").write_text(json.dumps(result, indent=2), encoding="utf-8")
    console.print(f"{args.split} accuracy: [bold green]{accuracy:.4f}[/] on {len(records)} images")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace, run_dir: Path) -> int:
    model = restore_model(load_checkpoint(args.checkpoint))
    prediction = predict(model, args.image, averaging=args.average, seed=config.SEED)
    (run_dir / "prediction.json").write_text(prediction.to_json(), encoding="utf-8")
    console.print(f"{args.image}: [bold]{prediction.label.value}[/] "
                  f"(confidence {prediction.confidence:.4f}, {prediction.combinations} combination(s))")
    return EXIT_OK


def cmd_report(args: argparse.Namespace, run_dir: Path) -> int:
    if args.manifest is not None:
        records = read_manifest(args.manifest)
        console.print(_rating_table(summarize_by_rating(records), mean_score_by_rating(records)))

    reports: List[TrainReport] = []
    for path in args.reports:
        try:
            reports.append(TrainReport.load(path))
        except (OSError, ValueError, ValidationError) as e:
            logger.warning(f"Skipping malformed report {path}: {e}")
            err_console.print(f"[yellow]warning[/] skipping malformed report {path}")
    if not reports:
        raise ReportError("No valid report to compare")

    reports.sort(key=lambda r: -(r.test_accuracy or 0.0))
    console.print(_results_table(reports, reference=args.reference))
    console.print(_comparison_table(reports))
    rows = [{"method": n, "accuracy": a, "source": s} for n, a, s in comparison_rows(reports)]
    (run_dir / "comparison.json").write_text(json.dumps(rows, indent=2), encoding="utf-8")
    return EXIT_OK


def cmd_weights(args: argparse.Namespace, run_dir: Path) -> int:
    kind = BackboneKind.parse(config.BACKBONE)
    out = port_torchvision_weights(kind, args.out or ported_weights_path(kind, _weights_cache_dir()))
    console.print(f"Ported {kind.display_name} weights: [cyan]{out}[/] (use with --weights or WEIGHTS_PATH)")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, Path], int]] = {
    "ingest": cmd_ingest,
    "preview": cmd_preview,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "report": cmd_report,
    "weights": cmd_weights,
}


# ==============================================================================
# SECTION 5 : Entry point
# ==============================================================================

def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and return its exit code."""
    load_dotenv()
    try:
        args = build_parser().parse_args(argv)
        _configure(args)
        run_dir = _open_run(args)
        return COMMANDS[args.command](args, run_dir)
    except KeyboardInterrupt:
        err_console.print("[yellow]Interrupted[/]")
        return 130
    except Exception as e:
        code = handle_exception(e)
        err_console.print(f"[bold red]error[/] {e}")
        logger.error(f"Command failed with exit code {code}: {e}", exc_info=False)
        return code


if __name__ == "__main__":
    sys.exit(main())
