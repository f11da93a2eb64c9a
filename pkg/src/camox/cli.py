"""Command-line entry point: synth, extract, train, ablate, report, summary."""

import argparse
import sys
from datetime import datetime, timezone
from pathlib import Path

from loguru import logger
from pydantic import ValidationError

from . import __version__
from .config import load_config, settings
from .errors import CamoxError, ConfigError, DataFormatError
from .ingest import dataset_summary, extract_ppg, load_dataset, read_frames, read_meta, write_ppg_csv
from .metrics import EvaluationReport, ReportConfig, read_ablation, report, write_ablation, write_report
from .models import Artifact, CaptureMeta, Hand, RunManifest, TrainConfig
from .pipeline import (
    MANIFEST_NAME,
    ablation_run,
    ablation_trend,
    dataset_hash,
    file_sha256,
    read_predictions,
    run_loocv,
    write_manifest,
    write_predictions,
)
from .synth import StudySpec, generate_study

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4
EXIT_NOT_TRAINED = 5

DEFAULT_ABLATION_FLOORS = [70.0, 75.0, 80.0, 85.0, 90.0]

LOG_FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {message}"


def configure_logging(level: str) -> None:
    """Replace loguru's default sink with a single stderr sink."""
    logger.remove()
    logger.add(sys.stderr, level=level.upper(), format=LOG_FORMAT)


def _float_list(value: str) -> list[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {value!r}") from e


def _subject_list(values: list[str] | None) -> list[str] | None:
    if not values:
        return None
    return [s.strip() for v in values for s in v.split(",") if s.strip()]


def _now() -> datetime:
    return datetime.now(timezone.utc)


def _finish_manifest(manifest: RunManifest, out_dir: Path, paths: list[Path]) -> Path:
    manifest.artifacts = [Artifact(path=str(p), sha256=file_sha256(p)) for p in paths]
    manifest.finished_at = _now()
    path = out_dir / MANIFEST_NAME
    write_manifest(manifest, path)
    return path


def _new_manifest(args: argparse.Namespace, config: dict, data_hash: str | None = None,
                  seed: int | None = None) -> RunManifest:
    return RunManifest(
        command=args.command,
        argv=list(args.argv),
        config=config,
        dataset_hash=data_hash,
        seed=seed,
        started_at=_now(),
        version=__version__,
    )


def _print_summary(dataset_dir: Path, floor: float) -> None:
    summary = dataset_summary(load_dataset(dataset_dir), floor)
    print(f"Samples (label >= {floor:g}%): {summary.n_samples}")
    print("Label histogram:")
    for label, count in summary.histogram.items():
        print(f"  {label:>8}%  {count}")
    print(f"{'subject':>8} {'hand':>6} {'dur[s]':>8} {'samples':>8} {'min':>6} {'mean':>6} {'max':>6}  flags")
    for r in summary.recordings:
        stats = (
            f"{r.spo2_min:6.1f} {r.spo2_mean:6.1f} {r.spo2_max:6.1f}"
            if r.n_samples else f"{'-':>6} {'-':>6} {'-':>6}"
        )
        print(
            f"{r.subject_id:>8} {r.hand.value:>6} {r.duration_sec:8.1f} {r.n_samples:8d} {stats}  "
            f"{','.join(r.tissue_flags)}"
        )


def _fmt_rate(value: float | None) -> str:
    return "n/a" if value is None else f"{100.0 * value:.0f}%"


def _print_report(result: EvaluationReport) -> None:
    print(f"MAE (mean over {result.n_subjects} subjects): {result.mae:.2f}%  "
          f"pooled: {result.pooled_mae:.2f}%")
    print(f"Bland-Altman mean difference {result.mean_diff:.2f}%, LOA {result.loa:.2f}%")
    for s in result.subjects:
        print(f"  subject {s.subject_id}: MAE {s.mae:.2f}%, "
              f"mu {s.bland_altman.mean_diff:.2f}%, LOA {s.bland_altman.loa_halfwidth:.2f}%")
    for entry in result.classification:
        c = entry.at_boundary
        line = (f"SpO2 < {entry.threshold:g}% at boundary {c.decision_boundary:g}%: "
                f"sensitivity {_fmt_rate(c.sensitivity)}, specificity {_fmt_rate(c.specificity)}")
        if entry.roc is not None:
            line += f", AUC {entry.roc.auc:.2f} (best boundary {entry.roc.best_boundary:g}%)"
        else:
            line += ", ROC n/a (single class)"
        print(line)


# --- commands ----------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    spec = load_config(args.spec, StudySpec, seed=args.seed)
    out_dir = Path(args.out or settings.data_dir)
    generate_study(spec, out_dir)

    manifest = _new_manifest(args, spec.model_dump(mode="json"), dataset_hash(out_dir), spec.seed)
    files = sorted(p for p in out_dir.rglob("*") if p.is_file() and p.name != MANIFEST_NAME)
    _finish_manifest(manifest, out_dir, files)
    _print_summary(out_dir, spec.protocol.floor_spo2)
    print(f"Dataset hash: {manifest.dataset_hash}")
    return EXIT_OK


def cmd_extract(args: argparse.Namespace) -> int:
    frames_path = Path(args.frames)
    try:
        frames = read_frames(frames_path)
    except DataFormatError as e:
        raise ConfigError(str(e)) from e

    meta_path = Path(args.meta) if args.meta else frames_path.parent / "meta.json"
    if meta_path.is_file():
        meta = read_meta(meta_path)
    else:
        meta = CaptureMeta(subject_id=args.subject, hand=Hand(args.hand), fps=frames.fps)

    rec = extract_ppg(frames, meta)
    out_csv = Path(args.out) if args.out else frames_path.with_name("ppg_extracted.csv")
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    write_ppg_csv(rec, out_csv)
    logger.info(f"Extracted {rec.n_frames} frames to {out_csv}")
    print(f"{rec.n_frames} frames -> {out_csv}")
    return EXIT_OK


def _train_config(args: argparse.Namespace) -> TrainConfig:
    return load_config(
        args.config,
        TrainConfig,
        seed=args.seed,
        epochs=args.epochs,
        subject_exclusions=_subject_list(args.exclude_subject),
        clamp_predictions=True if args.clamp else None,
    )


def cmd_train(args: argparse.Namespace) -> int:
    config = _train_config(args)
    dataset_dir = Path(args.dataset or settings.data_dir)
    out_dir = Path(args.out or settings.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = args.jobs or settings.jobs

    dataset = load_dataset(dataset_dir)
    manifest = _new_manifest(args, config.model_dump(mode="json"), dataset_hash(dataset_dir), config.seed)
    result = run_loocv(dataset, config, jobs=jobs, checkpoint_dir=out_dir / "checkpoints")

    written = [Path(s.checkpoint) for s in result.splits if s.checkpoint]
    predictions_path = out_dir / "predictions.csv"
    write_predictions(result.predictions, predictions_path)
    written.append(predictions_path)
    splits_path = out_dir / "splits.json"
    splits_path.write_text(
        result.model_dump_json(include={"plan", "splits"}, indent=2) + "\n", encoding="utf-8"
    )
    written.append(splits_path)

    print(f"Per-subject MAE {result.subject_mean_mae:.2f}%, pooled MAE {result.pooled_mae:.2f}% "
          f"over {len(result.predictions)} samples")
    for s in result.splits:
        print(f"  split {s.split_id}: test {s.test_subject} (val {s.val_subject}) "
              f"MAE {s.test_mae:.2f}%, best epoch {s.best_epoch}")

    floors = args.floors
    if floors is None and args.command == "ablate":
        floors = DEFAULT_ABLATION_FLOORS
    if floors:
        rows = ablation_run(dataset, config, floors, jobs=jobs, reuse=result)
        ablation_path = out_dir / "ablation.csv"
        write_ablation(rows, ablation_path)
        written.append(ablation_path)
        for row in rows:
            print(f"  floor {row.floor:g}%: MAE {row.mae:.2f}% ({row.n_samples} samples)")
        if len(rows) > 1:
            print(f"Spearman(floor, MAE) = {ablation_trend(rows):.3f}")

    _finish_manifest(manifest, out_dir, written)
    if not result.trained:
        logger.warning("No training performed (epochs=0)")
        return EXIT_NOT_TRAINED
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    config = load_config(
        args.config,
        ReportConfig,
        thresholds=args.thresholds,
        decision_boundary=args.boundary,
        clamp=True if args.clamp else None,
    )
    predictions_path = Path(args.predictions)
    pred_set = read_predictions(predictions_path)
    ablation = read_ablation(args.ablation) if args.ablation else None
    out_dir = Path(args.out) if args.out else predictions_path.parent / "report"

    manifest = _new_manifest(args, config.model_dump(mode="json"))
    result = report(pred_set, config, ablation)
    written = write_report(result, pred_set, out_dir, config)
    _finish_manifest(manifest, out_dir, written)
    _print_report(result)
    return EXIT_OK


def cmd_summary(args: argparse.Namespace) -> int:
    _print_summary(Path(args.dataset or settings.data_dir), args.floor)
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Override the config seed")
    common.add_argument("--jobs", type=int, default=None, help="Worker processes for LOOCV splits")
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--log-level", default=None, help="Log level (default from CAMOX_LOG_LEVEL)")

    parser = argparse.ArgumentParser(prog="camox", description="Smartphone-camera SpO2 estimation")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="Generate a synthetic study")
    p.add_argument("--spec", default=None, help="StudySpec JSON (defaults when omitted)")
    p.add_argument("--out", default=None, help="Dataset directory (default CAMOX_DATA_DIR)")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("extract", parents=[common], help="Frame file to PPG CSV")
    p.add_argument("frames", help="CAMOX1 frame file")
    p.add_argument("--out", default=None, help="Output CSV")
    p.add_argument("--meta", default=None, help="meta.json (default: next to the frame file)")
    p.add_argument("--subject", default="0", help="Subject id when no meta.json exists")
    p.add_argument("--hand", default=Hand.LEFT.value, choices=[h.value for h in Hand])
    p.set_defaults(handler=cmd_extract)

    for name, help_text in (("train", "Run LOOCV training"), ("ablate", "LOOCV ablation over SpO2 floors")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("dataset", nargs="?", default=None, help="Dataset directory (default CAMOX_DATA_DIR)")
        p.add_argument("--out", default=None, help="Run directory (default CAMOX_OUTPUT_DIR)")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--exclude-subject", action="append", default=None,
                       help="Subject id to leave out; repeatable, comma lists allowed")
        p.add_argument("--floors", type=_float_list, default=None, help="Ablation floors, e.g. 70,75,80")
        p.add_argument("--clamp", action="store_true", help="Clamp predictions to [0, 100]")
        p.set_defaults(handler=cmd_train)

    p = sub.add_parser("report", parents=[common], help="Evaluate a predictions CSV")
    p.add_argument("predictions", help="predictions.csv from train")
    p.add_argument("--thresholds", type=_float_list, default=None, help="e.g. 95,90,85")
    p.add_argument("--boundary", type=float, default=None, help="Decision boundary (default: threshold)")
    p.add_argument("--ablation", default=None, help="ablation.csv to include")
    p.add_argument("--clamp", action="store_true", help="Clamp predictions to [0, 100]")
    p.add_argument("--out", default=None, help="Report directory")
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("summary", parents=[common], help="Print dataset sample statistics")
    p.add_argument("dataset", nargs="?", default=None)
    p.add_argument("--floor", type=float, default=70.0)
    p.set_defaults(handler=cmd_summary)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    configure_logging(args.log_level or settings.log_level)

    try:
        return args.handler(args)
    except CamoxError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except ValidationError as e:
        logger.error(f"Validation failed: {e}")
        return EXIT_USAGE
    except FileNotFoundError as e:
        logger.error(f"File not found: {e}")
        return EXIT_DATA
    except AssertionError as e:
        logger.error(f"Internal assertion failed: {e}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
