import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from fs.path import join

from panoptrack.__version__ import __version__
from panoptrack.config.arguments import COMMANDS, COMMON
from panoptrack.config.defaults import (
    DESCRIPTION,
    DETECTIONS_FILE,
    GT_FILE,
    MOTION_MODELS,
    PIPELINES,
    POSES_FILE,
    SEED_ENV_VAR,
)
from panoptrack.config.settings import RunConfig, load_run_config
from panoptrack.fusion import FrameBundle, FusionConfig, merge_detections
from panoptrack.learn import build_trajectory_dataset, train_motion_model
from panoptrack.metrics import (
    CURVE_HEADER,
    GroundTruth,
    Matcher,
    MetricReport,
    curve_rows,
    evaluate,
    format_table,
    mota_iou,
)
from panoptrack.motion import LstmWeights, build_motion_model, load_weights, save_weights
from panoptrack.sim import generate, load_rig, load_scenario
from panoptrack.tracker import TrackingResult, run_pipeline
from panoptrack.utils.errors import ConfigError, PanoptrackError, RecordError
from panoptrack.utils.filesystem import (
    Workspace,
    default_output_dir,
    ensure_parent,
    get_workspace,
    resolve,
)
from panoptrack.utils.logging import get_logger, log_written
from panoptrack.utils.parser import parse_arguments
from panoptrack.utils.records import (
    read_bundles,
    read_ground_truth,
    read_results,
    write_detections,
    write_ground_truth,
    write_poses,
    write_results,
    write_trajectories,
)

COMPARE_HEADER: Tuple[str, ...] = ("Pipeline", "Motion", "AMOTA", "AMOTP", "Recall", "MOTA", "IDS")


def get_log_level(level: str, quiet: bool, verbose: bool) -> int:
    if level != "INFO":
        return getattr(logging, level)
    elif verbose:
        return logging.DEBUG
    elif quiet:
        return logging.ERROR
    else:
        return getattr(logging, "INFO")


def get_seed(seed: Optional[int]) -> Optional[int]:
    if seed is not None:
        return seed
    value = os.environ.get(SEED_ENV_VAR)
    if value is None or not value.strip():
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigError(SEED_ENV_VAR, f"not an integer: {value!r}") from None


def _run_config(args: Dict[str, Any], workspace: Workspace, **overrides) -> RunConfig:
    return load_run_config(
        filesystem=workspace.source,
        path=args.get("config"),
        overrides=overrides,
        preset=args.get("preset"),
    )


def input_path(args: Dict[str, Any], config: RunConfig, name: str) -> str:
    path = args.get(name) or getattr(config.paths, name)
    if not path:
        raise ConfigError(f"paths.{name}", f"no {name} file given (use --{name} or [paths] {name})")
    return resolve(path)


def _write_text(workspace: Workspace, path: str, text: str, logger: logging.Logger) -> None:
    ensure_parent(workspace.sink, path)
    workspace.sink.writetext(path, text, encoding="utf-8")
    log_written(path=path, logger=logger)
    return None


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def log_table(table: str, logger: logging.Logger) -> None:
    for line in table.splitlines():
        logger.info(line)
    return None


def _is_builtin(source: str) -> bool:
    return source.startswith("builtin:") or ("/" not in source and not source.endswith(".toml"))


def load_motion_weights(
    config: RunConfig, workspace: Workspace, motion_model: str
) -> Optional[LstmWeights]:
    if motion_model != "lstm":
        return None
    if not config.motion.weights:
        raise ConfigError("motion.weights", "the lstm motion model needs --weights")
    return load_weights(workspace.source, resolve(config.motion.weights))


def cmd_simulate(args: Dict[str, Any], workspace: Workspace, logger: logging.Logger) -> None:
    source = args["scenario"]
    scenario = load_scenario(
        source if _is_builtin(source) else resolve(source), workspace.source
    )
    seed = get_seed(args["seed"])
    if seed is not None:
        scenario = replace(scenario, seed=seed)
    rig_source = args["rig"] or scenario.rig
    rig = load_rig(
        rig_source if _is_builtin(rig_source) else resolve(rig_source), workspace.source
    )
    gt, bundles = generate(scenario, rig, jobs=args["jobs"], logger=logger)

    out = resolve(args["out"]) if args["out"] else default_output_dir("runs", scenario.name, scenario.seed)
    workspace.sink.makedirs(out, recreate=True)
    for name, writer, payload in (
        (DETECTIONS_FILE, write_detections, bundles),
        (POSES_FILE, write_poses, bundles),
        (GT_FILE, write_ground_truth, gt),
    ):
        path = join(out, name)
        count = writer(workspace.sink, path, payload)
        logger.debug(f"{count} records in {path}")
        log_written(path=path, logger=logger)
    return None


def cmd_track(args: Dict[str, Any], workspace: Workspace, logger: logging.Logger) -> None:
    config = _run_config(
        args,
        workspace,
        tracker={"pipeline": args["pipeline"], "motion_model": args["motion"]},
        motion={"weights": args["weights"]},
    )
    bundles = read_bundles(
        workspace.source,
        input_path(args, config, "detections"),
        input_path(args, config, "poses"),
    )
    logger.info(f"read {len(bundles)} frames")
    weights = load_motion_weights(config, workspace, config.tracker.motion_model)
    motion = build_motion_model(config.tracker.motion_model, weights, config.kalman)
    result = run_pipeline(
        bundles, config.tracker, config.affinity, config.fusion, motion, logger
    )
    logger.info(
        f"{config.tracker.pipeline} with motion {config.tracker.motion_model}: "
        f"{len(result.track_ids)} tracks"
    )
    ensure_parent(workspace.sink, args["out"])
    write_results(workspace.sink, args["out"], result)
    log_written(path=args["out"], logger=logger)
    return None


def world_detections(
    bundles: Sequence[FrameBundle], fusion: FusionConfig, logger: logging.Logger
) -> Dict[int, List]:
    return {
        bundle.frame: merge_detections(
            bundle,
            iou_threshold=fusion.nms_iou,
            category_aware=fusion.category_aware,
            score_floor=fusion.score_floor,
            logger=logger,
        )
        for bundle in bundles
    }


def cmd_train_motion(args: Dict[str, Any], workspace: Workspace, logger: logging.Logger) -> None:
    seed = get_seed(args["seed"])
    config = _run_config(
        args,
        workspace,
        train={
            "epochs": args["epochs"],
            "seed": seed,
            "cross_camera": False if args["single_camera"] else None,
        },
        motion={"hidden_size": args["hidden_size"]},
    )
    gt = read_ground_truth(workspace.source, input_path(args, config, "gt"))
    bundles = read_bundles(
        workspace.source,
        input_path(args, config, "detections"),
        input_path(args, config, "poses"),
    )
    dataset = build_trajectory_dataset(
        gt,
        world_detections(bundles, config.fusion, logger),
        threshold=config.train.bev_match_threshold,
        window=config.train.window,
        cross_camera=config.train.cross_camera,
    )
    logger.info(f"built {len(dataset)} trajectory windows of {config.train.window} frames")
    if args["dataset"]:
        ensure_parent(workspace.sink, args["dataset"])
        write_trajectories(workspace.sink, args["dataset"], dataset)
        log_written(path=args["dataset"], logger=logger)
    if not dataset:
        raise ConfigError("train.window", "no trajectory window has a matched detection")
    weights = LstmWeights.initialize(config.motion.hidden_size, seed=config.train.seed)
    log = train_motion_model(dataset, weights, config.train, logger)

    ensure_parent(workspace.sink, args["out"])
    save_weights(weights, workspace.sink, args["out"])
    log_written(path=args["out"], logger=logger)
    rows = [
        [r.epoch, r.mean_loss, r.traj_term, r.linear_term, "" if r.validation_loss is None else r.validation_loss]
        for r in log
    ]
    _write_text(
        workspace,
        args["log"],
        _csv_text(("epoch", "mean_loss", "traj_term", "linear_term", "validation_loss"), rows),
        logger,
    )
    return None


def _matcher(args: Dict[str, Any], config: RunConfig) -> Matcher:
    text = args.get("matcher") or config.metrics.matcher
    try:
        return Matcher.parse(text)
    except ValueError as error:
        raise ConfigError("matcher", str(error)) from None


def cmd_eval(args: Dict[str, Any], workspace: Workspace, logger: logging.Logger) -> None:
    config = _run_config(args, workspace, metrics={"n_points": args["n_points"]})
    matcher = _matcher(args, config)
    result = read_results(workspace.source, input_path(args, config, "result"))
    gt = read_ground_truth(workspace.source, input_path(args, config, "gt"))
    report = evaluate(result, gt, matcher, config.metrics.n_points, logger)
    payload = report.to_dict()
    if args["iou"] is not None:
        mota, mismatch = mota_iou(result, gt, args["iou"])
        payload["iou"] = {"threshold": args["iou"], "mota": mota, "mismatch": mismatch}
        logger.info(f"MOTA at 3D IoU {args['iou']}: {mota:.3f} (mismatch {mismatch:.4f})")
    text = json.dumps(payload, indent=2) + "\n"
    _write_text(workspace, args["out"], text, logger)
    _write_text(workspace, args["curves"], _csv_text(CURVE_HEADER, curve_rows(report)), logger)
    log_table(report.table(), logger)
    sys.stdout.write(text)
    return None


def compare_rows(
    bundles: Sequence[FrameBundle],
    gt: GroundTruth,
    config: RunConfig,
    weights: Optional[LstmWeights],
    matcher: Matcher,
    jobs: int = 1,
    logger: Optional[logging.Logger] = None,
) -> List[Tuple[str, str, MetricReport]]:
    logger = logger or logging.getLogger("panoptrack")
    combos = [(p, m) for p in PIPELINES for m in MOTION_MODELS]

    def run(combo: Tuple[str, str]) -> Tuple[str, str, MetricReport]:
        pipeline, motion_model = combo
        tracker = replace(config.tracker, pipeline=pipeline, motion_model=motion_model)
        motion = build_motion_model(motion_model, weights, config.kalman)
        result: TrackingResult = run_pipeline(
            bundles, tracker, config.affinity, config.fusion, motion, logger
        )
        return pipeline, motion_model, evaluate(
            result, gt, matcher, config.metrics.n_points, logger
        )

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run, combos))
    return [run(combo) for combo in combos]


def format_compare_table(rows: Sequence[Tuple[str, str, MetricReport]]) -> str:
    return format_table(
        COMPARE_HEADER,
        [
            (pipeline, motion, r.amota, r.amotp, r.recall, r.mota, r.ids)
            for pipeline, motion, r in rows
        ],
    )


def cmd_compare(args: Dict[str, Any], workspace: Workspace, logger: logging.Logger) -> None:
    config = _run_config(
        args,
        workspace,
        motion={"weights": args["weights"]},
        metrics={"n_points": args["n_points"]},
    )
    matcher = _matcher(args, config)
    weights = load_motion_weights(config, workspace, "lstm")
    bundles = read_bundles(
        workspace.source,
        input_path(args, config, "detections"),
        input_path(args, config, "poses"),
    )
    gt = read_ground_truth(workspace.source, input_path(args, config, "gt"))
    rows = compare_rows(bundles, gt, config, weights, matcher, args["jobs"], logger)
    table = format_compare_table(rows)
    _write_text(workspace, args["out"], table, logger)
    log_table(table, logger)
    return None


HANDLERS: Dict[str, Callable[[Dict[str, Any], Workspace, logging.Logger], None]] = {
    "simulate": cmd_simulate,
    "track": cmd_track,
    "train-motion": cmd_train_motion,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


def run(args: Dict[str, Any], workspace: Workspace, logger: logging.Logger) -> int:
    try:
        HANDLERS[args["command"]](args, workspace, logger)
    except (RecordError, ConfigError) as error:
        logger.critical(str(error))
        return 2
    except PanoptrackError as error:
        logger.critical(str(error))
        return 1
    return 0


def main(argv: Optional[Sequence[str]] = None) -> None:

    args = parse_arguments(
        description=DESCRIPTION,
        common=COMMON,
        commands=COMMANDS,
        argv=argv,
        version=__version__,
    )

    logger = get_logger(
        console_level=get_log_level(
            level=args["log_level"], quiet=args["quiet"], verbose=args["verbose"]
        ),
        log_file=args["log_file"],
    )

    workspace = get_workspace(dry_run=args["dry_run"], logger=logger)
    try:
        code = run(args, workspace, logger)
    finally:
        workspace.close()

    if code:
        sys.exit(code)


if __name__ == "__main__":
    main()
