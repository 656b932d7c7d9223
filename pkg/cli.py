"""
Command-line entry point.

    python cli.py synth --seed 7 --out data/
    python cli.py train --config experiment.json --out runs/train
    python cli.py pseudolabel --config experiment.json --checkpoint runs/train/checkpoint
    python cli.py selftrain --mode proposed --config experiment.json --out runs/proposed
    python cli.py eval --config experiment.json --checkpoint runs/proposed/checkpoint
    python cli.py cam --config experiment.json --checkpoint runs/proposed/checkpoint
    python cli.py compare --results runs/*/result.json --out runs/compare

Exit status: 0 on success, 1 on a pipeline error (JSON error payload on
stderr), 2 on a usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import torch

from config import settings
from constants import EXIT_DOMAIN_ERROR, EXIT_OK, EXIT_USAGE_ERROR, SUPPORTED_BACKBONES
from dataset import GradeLabel, SynthConfig, write_synthetic
from error_responses import GradingError, create_error_response, create_success_response
from interpret import cams_for_scans, export_comparison, export_heatmap, heatmap_filename
from label_guard import evaluation_scope
from orchestrate import (
    MODES,
    ComparisonReport,
    ComparisonRow,
    ExperimentConfig,
    ExperimentResult,
    compare_report,
    load_datasets,
    render_cv_table,
    run_cross_validation,
    run_experiment,
)
from pseudolabel import predict_pseudo_labels
from run_manifest import write_run_manifest
from splits import materialize_target, split_target
from structured_logger import get_logger, log_exception
from train import evaluate_model, load_checkpoint, save_training_checkpoints

logger = get_logger(__name__)

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Seed for data, splits, initialization and shuffling")
    common.add_argument("--config", type=Path, default=None, help="Experiment (or synthetic) configuration JSON")
    common.add_argument("--backbone", choices=SUPPORTED_BACKBONES, default=None)
    common.add_argument("--mode", choices=MODES, default=None)
    common.add_argument("--epochs", type=int, default=None, help="Override training epochs")
    common.add_argument("--out", type=Path, default=None, help="Output directory (default: <output_root>/<command>)")

    parser = argparse.ArgumentParser(prog="glaucoma-selftrain", description="Glaucoma grading with OCT self-training")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("synth", parents=[common], help="Write a synthetic source/target dataset pair")
    commands.add_parser("train", parents=[common], help="Cross-validate on the source set and save the best fold")

    pseudo = commands.add_parser("pseudolabel", parents=[common], help="Pseudo-label the target pool")
    pseudo.add_argument("--checkpoint", type=Path, required=True)

    commands.add_parser("selftrain", parents=[common], help="Run one experiment mode end to end")

    evaluate = commands.add_parser("eval", parents=[common], help="Score a checkpoint on the target test split")
    evaluate.add_argument("--checkpoint", type=Path, required=True)

    cam = commands.add_parser("cam", parents=[common], help="Export class activation map overlays")
    cam.add_argument("--checkpoint", type=Path, required=True)
    cam.add_argument("--compare-checkpoint", type=Path, default=None, help="Second model rendered side by side")
    cam.add_argument("--limit", type=int, default=4, help="Number of test scans")
    cam.add_argument("--grades", nargs="*", default=None, help="Grades to map (default: the predicted grade)")
    cam.add_argument("--dump-raw", action="store_true", help="Also write each map as .npy")

    compare = commands.add_parser("compare", parents=[common], help="Tabulate experiment results")
    compare.add_argument("--results", type=Path, nargs="+", required=True)
    return parser


# ============================================================================
# HELPERS
# ============================================================================

def _out_dir(args: argparse.Namespace) -> Path:
    out = args.out or Path(settings.output_root) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    """Load --config and apply command-line overrides, revalidating the result."""
    config = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    data = config.model_dump(mode="json")
    seed = args.seed
    if seed is None and args.config is None:
        seed = settings.default_seed
    if seed is not None:
        data["seeds"] = {"split": seed, "init": seed, "shuffle": seed}
        if data.get("synthetic") is not None:
            data["synthetic"]["seed"] = seed
    if args.backbone:
        data["backbone"] = args.backbone
    if args.mode:
        data["mode"] = args.mode
    if args.epochs is not None:
        data["training"]["epochs"] = args.epochs
    return ExperimentConfig.from_dict(data)


def _seeds(config: ExperimentConfig) -> Dict[str, int]:
    seeds = config.seeds.model_dump()
    if config.synthetic is not None:
        seeds["synthetic"] = config.synthetic.seed
    return seeds


def _test_split(config: ExperimentConfig):
    _, target = load_datasets(config)
    split = split_target(target, config.pool_fraction, config.seeds.split)
    pool, test = materialize_target(target, split)
    return target, split, pool, test


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_synth(args: argparse.Namespace) -> Dict[str, Any]:
    out = _out_dir(args)
    data: Dict[str, Any] = json.loads(args.config.read_text(encoding="utf-8")) if args.config else {}
    if args.seed is not None:
        data["seed"] = args.seed
    data.setdefault("seed", settings.default_seed)
    config = SynthConfig.parse(data)
    paths = write_synthetic(config, out)
    write_run_manifest(out, "synth", config, {"synthetic": config.seed}, paths.values())
    return {key: str(path) for key, path in paths.items()}


def cmd_train(args: argparse.Namespace) -> Dict[str, Any]:
    out = _out_dir(args)
    config = experiment_config(args)
    source, _ = load_datasets(config)
    stage_one = run_cross_validation(source, config, config.architecture_for("ragnet_v2"))
    artifacts = save_training_checkpoints(out, stage_one.graph, stage_one.params, stage_one.trace, config.training)
    for fold, trace in enumerate(stage_one.fold_traces):
        artifacts.append(trace.write_jsonl(out / f"training_trace_fold{fold}.jsonl"))
    summary = {
        "best_fold": stage_one.best_fold,
        "checkpoint_selection": stage_one.trace.selection,
        "selected_epoch": stage_one.trace.selected_epoch,
        "cv": stage_one.summary.to_dict(),
        "folds": [report.to_dict() for report in stage_one.fold_reports],
    }
    summary_path = _write_json(out / "cv_summary.json", summary)
    (out / "architecture.json").write_text(stage_one.graph.to_json() + "\n", encoding="utf-8")
    write_run_manifest(out, "train", config, _seeds(config), [*artifacts, summary_path, out / "architecture.json"])
    return summary


def cmd_pseudolabel(args: argparse.Namespace) -> Dict[str, Any]:
    out = _out_dir(args)
    config = experiment_config(args)
    graph, params, *_ = load_checkpoint(args.checkpoint)
    _, split, pool, _ = _test_split(config)
    labels = predict_pseudo_labels(params, graph, pool, config.training.eval_batch_size)
    labels_path = labels.to_csv(out / "pseudo_labels.csv")
    split_path = split.save(out / "target_split.json")
    write_run_manifest(out, "pseudolabel", config, _seeds(config), [labels_path, split_path])
    return {"n_labels": len(labels), "label_counts": labels.label_counts()}


def cmd_selftrain(args: argparse.Namespace) -> Dict[str, Any]:
    out = _out_dir(args)
    config = experiment_config(args)
    result = run_experiment(config)
    artifacts: List[Path] = [result.save(out / "result.json")]

    if result.test is not None:
        table = ComparisonReport(
            rows=[ComparisonRow(result.mode, result.test.to_dict(), {})],
            test_split_id=result.test_split_id,
        ).render()
    else:
        table = render_cv_table(result.cv_by_architecture)
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    artifacts.append(out / "report.txt")
    print(result.to_json())
    print(table)

    if result.params is not None and result.graph is not None and result.trace is not None:
        artifacts.extend(save_training_checkpoints(out, result.graph, result.params, result.trace, config.training))
    if result.pseudo_labels is not None:
        artifacts.append(result.pseudo_labels.to_csv(out / "pseudo_labels.csv"))
    if result.trace is not None:
        artifacts.append(result.trace.write_jsonl(out / "training_trace.jsonl"))

    write_run_manifest(out, "selftrain", config, _seeds(config), artifacts)
    return result.to_dict()


def cmd_eval(args: argparse.Namespace) -> Dict[str, Any]:
    out = _out_dir(args)
    config = experiment_config(args)
    graph, params, *_ = load_checkpoint(args.checkpoint)
    _, _, _, test = _test_split(config)
    with evaluation_scope("test"):
        report = evaluate_model(params, graph, test, config.training.eval_batch_size, split="test")
    path = _write_json(out / "eval.json", report.to_dict())
    write_run_manifest(out, "eval", config, _seeds(config), [path])
    return report.to_dict()


def cmd_cam(args: argparse.Namespace) -> Dict[str, Any]:
    out = _out_dir(args)
    config = experiment_config(args)
    models = [load_checkpoint(args.checkpoint)[:2]]
    if args.compare_checkpoint:
        models.append(load_checkpoint(args.compare_checkpoint)[:2])
    _, _, _, test = _test_split(config)
    scans = test.scans()[: max(0, args.limit)]
    grades = [GradeLabel.parse(g) for g in args.grades] if args.grades else None

    artifacts: List[Path] = []
    for scan in scans:
        per_model = [cams_for_scans(params, graph, [scan], grades) for graph, params in models]
        for index, cam in enumerate(per_model[0]):
            artifacts.append(export_heatmap(cam, scan, out / heatmap_filename(scan.image_id, cam.grade), args.dump_raw))
            if len(per_model) > 1 and index < len(per_model[1]):
                artifacts.append(export_comparison(
                    [cam, per_model[1][index]], scan,
                    out / heatmap_filename(scan.image_id, cam.grade, prefix="compare_"),
                ))
    write_run_manifest(out, "cam", config, _seeds(config), artifacts)
    return {"n_maps": len(artifacts)}


def cmd_compare(args: argparse.Namespace) -> Dict[str, Any]:
    out = _out_dir(args)
    results = [ExperimentResult.load(path) for path in args.results]
    report = compare_report(results)
    table = report.render()
    print(table)
    (out / "comparison.txt").write_text(table + "\n", encoding="utf-8")
    path = _write_json(out / "comparison.json", report.to_dict())
    write_run_manifest(
        out, "compare", {"results": [str(p) for p in args.results]},
        {}, [path, out / "comparison.txt"],
    )
    return report.to_dict()


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "pseudolabel": cmd_pseudolabel,
    "selftrain": cmd_selftrain,
    "eval": cmd_eval,
    "cam": cmd_cam,
    "compare": cmd_compare,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE_ERROR

    torch.set_num_threads(settings.torch_threads)
    try:
        data = HANDLERS[args.command](args)
    except GradingError as exc:
        print(json.dumps(create_error_response(exc), indent=2, default=str), file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        log_exception(logger, "Command failed", exc, command=args.command)
        print(json.dumps(create_error_response(exc), indent=2), file=sys.stderr)
        return EXIT_DOMAIN_ERROR

    logger.info("Command finished", command=args.command)
    if args.command not in ("selftrain", "compare"):
        print(json.dumps(create_success_response(data, message=f"{args.command} finished"), indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
