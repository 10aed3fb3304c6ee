from __future__ import annotations

import argparse
import json
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .benchmark import DetectorSource, HarrisSource, KeypointFileSource, KeypointSource, OracleSource
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, resolve_config
from .detector import build_detector, detector_forward
from .errors import CheckpointError, DivergenceError, EstimationError, FormatError
from .formats import (
    histogram_csv,
    load_homography,
    load_image_pgm,
    load_keypoints,
    load_tensor,
    matches_csv,
    save_homography,
    save_keypoints,
    save_tensor,
)
from .heatmap import Heatmap, activation_histogram, extract_keypoints, fraction_above_zero
from .matching import matched_coordinates, ransac_homography, spatial_match
from .models import ImageGray, Rng
from .profiles import get_suite, list_suites
from .reports import write_report
from .synthetic import load_pair_dir, synthetic_images, synthetic_pairs, synthetic_stereo_scenes
from .teacher import harris_teacher
from .tracing import TraceLogger
from .training import TrainingSample, loss_csv, train_stage1, train_stage2


KEYPOINTS_PREFIX = "keypoints:"


def _write_json(path: str | None, payload: dict) -> None:
    if path is None:
        print(json.dumps(payload, indent=2, sort_keys=True))
        return
    out_path = Path(path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fp:
        json.dump(payload, fp, indent=2, sort_keys=True)
        fp.write("\n")


def _exit_code_for_error(exc: BaseException) -> int:
    if isinstance(exc, CheckpointError):
        return 3
    if isinstance(exc, EstimationError):
        return 4
    if isinstance(exc, DivergenceError):
        return 5
    return 2


def _failed(command: str, exc: BaseException) -> int:
    print(f"{command} failed: {exc}")
    return _exit_code_for_error(exc)


def _resolve(args: argparse.Namespace) -> RunConfig:
    flags = {key: getattr(args, key) for key in args.config_keys}
    return resolve_config(flags, args.config)


def _start(args: argparse.Namespace, cfg: RunConfig, inputs: dict[str, Any]) -> tuple[Path, TraceLogger]:
    out = Path(args.out)
    comments = [f"command: {args.command}", *(f"{key}: {value}" for key, value in sorted(inputs.items()))]
    cfg.write_resolved(out, comments)
    trace = TraceLogger.in_directory(out)
    trace.log("command.start", command=args.command, version=__version__, **inputs)
    return out, trace


def _cmd_detect(args: argparse.Namespace) -> int:
    try:
        cfg = _resolve(args)
        out, trace = _start(args, cfg, {"image": args.image, "checkpoint": args.checkpoint})
        with trace:
            params = load_checkpoint(args.checkpoint)
            heatmap = detector_forward(params, load_image_pgm(args.image))
            kps = extract_keypoints(heatmap, cfg.q, cfg.nms_radius, cfg.max_k)
            save_keypoints(kps, out / "keypoints.csv")
            save_tensor(heatmap.to_tensor(), out / "heatmap.fpct")
            trace.log("detect.done", keypoints=len(kps), params_digest=params.digest())
        print(f"Detected {len(kps)} keypoints.")
        return 0
    except Exception as exc:
        return _failed("Detect", exc)


def _cmd_match(args: argparse.Namespace) -> int:
    try:
        cfg = _resolve(args)
        inputs = {"keypoints_a": args.keypoints_a, "keypoints_b": args.keypoints_b, "prewarp": args.prewarp or ""}
        out, trace = _start(args, cfg, inputs)
        with trace:
            kps_a = load_keypoints(args.keypoints_a)
            kps_b = load_keypoints(args.keypoints_b)
            prewarp = load_homography(args.prewarp) if args.prewarp else None
            matches = spatial_match(kps_a, kps_b, cfg.match_radius, cfg.mutual, prewarp=prewarp)
            (out / "matches.csv").write_text(matches_csv(matches), encoding="utf-8")
            trace.log("match.spatial", matches=len(matches))
            src, dst = matched_coordinates(kps_a, kps_b, matches)
            h_est, inliers = ransac_homography(src, dst, cfg.ransac_config())
            save_homography(h_est, out / "estimated.hom")
            trace.log("match.done", matches=len(matches), inliers=len(inliers))
        print(f"Matched {len(matches)} keypoints; {len(inliers)} RANSAC inliers.")
        return 0
    except Exception as exc:
        return _failed("Match", exc)


def _training_images(args: argparse.Namespace, cfg: RunConfig) -> list[ImageGray]:
    if args.synthetic is not None:
        return synthetic_images(args.synthetic, cfg.seed, cfg.input_width, cfg.input_height, cfg.n_shapes)
    paths = sorted(Path(args.data).glob("*.pgm"))
    if not paths:
        raise FormatError(f"No .pgm images found in '{args.data}'.")
    return [load_image_pgm(path) for path in paths]


def _cmd_train(args: argparse.Namespace) -> int:
    try:
        cfg = _resolve(args)
        inputs = {
            "data": args.data or "",
            "synthetic": args.synthetic if args.synthetic is not None else "",
            "stage": args.stage,
            "resume": args.resume or "",
        }
        out, trace = _start(args, cfg, inputs)
        with trace:
            tcfg = cfg.train_config()
            dataset = [
                TrainingSample(img, harris_teacher(img, cfg.teacher_k, cfg.teacher_top_n, cfg.nms_radius, cfg.teacher_method))
                for img in _training_images(args, cfg)
            ]
            params = load_checkpoint(args.resume) if args.resume else build_detector(cfg.detector_config(), Rng(cfg.seed))
            rows = []
            if args.stage in ("1", "both"):
                result = train_stage1(dataset, params, tcfg, trace)
                rows.extend(result.trace)
                params = result.params
                if args.stage == "both":
                    save_checkpoint(out / "checkpoint_stage1", params)
                    params = load_checkpoint(out / "checkpoint_stage1")
            if args.stage in ("2", "both"):
                result = train_stage2(dataset, params, tcfg, trace)
                rows.extend(result.trace)
                params = result.params
            save_checkpoint(out / "checkpoint", params)
            (out / "loss.csv").write_text(loss_csv(rows), encoding="utf-8")
        _write_json(
            None,
            {
                "stage": args.stage,
                "samples": len(dataset),
                "loss_rows": len(rows),
                "final_loss": rows[-1].loss if rows else None,
                "params_digest": params.digest(),
            },
        )
        return 0
    except Exception as exc:
        return _failed("Train", exc)


def _keypoint_source(detector: str, cfg: RunConfig) -> KeypointSource:
    if detector in ("harris", "shi-tomasi"):
        return HarrisSource(method=detector, k=cfg.teacher_k, nms_radius=cfg.nms_radius)
    if detector == "oracle":
        return OracleSource()
    if detector.startswith(KEYPOINTS_PREFIX):
        return KeypointFileSource(detector[len(KEYPOINTS_PREFIX) :])
    return DetectorSource(load_checkpoint(detector), selection=cfg.selection, q=cfg.q, nms_radius=cfg.nms_radius)


def _cmd_eval(args: argparse.Namespace) -> int:
    try:
        cfg = _resolve(args)
        suite = get_suite(args.suite)
        inputs = {"suite": suite.name, "detector": args.detector, "data": args.data or ""}
        out, trace = _start(args, cfg, inputs)
        with trace:
            if suite.inputs == "scenes":
                scenes = synthetic_stereo_scenes(
                    cfg.scenes, cfg.seed, n_points=cfg.stereo_points,
                    noise_px=cfg.stereo_noise_px, outlier_fraction=cfg.stereo_outlier_fraction,
                )
                report = suite.runner(scenes, cfg.pose_budgets, cfg.ransac_config(), cfg.seed, trace_logger=trace)
            else:
                if args.data:
                    pairs = load_pair_dir(args.data)
                else:
                    pairs = synthetic_pairs(
                        cfg.pairs, cfg.seed, cfg.input_width, cfg.input_height, cfg.n_shapes,
                        cfg.sampler_config(), cfg.photometric_values(),
                    )
                source = _keypoint_source(args.detector, cfg)
                if suite.name == "homography":
                    report = suite.runner(
                        source, pairs, cfg.eps_list, cfg.budget, cfg.match_radius, cfg.mutual,
                        cfg.prewarp, cfg.ransac_config(), trace_logger=trace,
                    )
                else:
                    report = suite.runner(source, pairs, cfg.eps_list, cfg.budget, trace_logger=trace)
            write_report(report, out, log_scale=suite.log_scale)
        _write_json(None, report.summary())
        return 0
    except Exception as exc:
        return _failed("Eval", exc)


def _cmd_inspect(args: argparse.Namespace) -> int:
    try:
        cfg = _resolve(args)
        out, trace = _start(args, cfg, {"heatmap": args.heatmap})
        with trace:
            heatmap = Heatmap.from_tensor(load_tensor(args.heatmap))
            histogram = activation_histogram(heatmap, cfg.bins, cfg.hist_lo, cfg.hist_hi)
            (out / "histogram.csv").write_text(histogram_csv(histogram), encoding="utf-8")
            above = fraction_above_zero(heatmap)
            trace.log("inspect.done", bins=cfg.bins, fraction_above_zero=above)
        print(f"fraction_above_zero: {above!r}")
        return 0
    except Exception as exc:
        return _failed("Inspect", exc)


def _cmd_suites(args: argparse.Namespace) -> int:
    suites = list_suites()
    if args.json:
        payload = [{"name": s.name, "description": s.description, "inputs": s.inputs} for s in suites]
        print(json.dumps(payload, indent=2, sort_keys=True))
        return 0
    for suite in suites:
        print(f"{suite.name:14} {suite.inputs:7} {suite.description}")
    return 0


_CONFIG_FLAGS: dict[str, tuple[str, ...]] = {
    "detect": ("seed", "q", "nms_radius", "max_k"),
    "match": (
        "seed", "match_radius", "mutual", "ransac_threshold", "ransac_max_iterations",
        "ransac_confidence", "ransac_min_iterations",
    ),
    "train": (
        "seed", "lr", "batch_size", "epochs1", "epochs2", "loss_mode", "huber_delta",
        "consistency_weight", "consistency_target", "gaussian_sigma", "smoothing_eps",
        "focal_alpha", "focal_gamma", "teacher_method", "photometric", "widths", "fpn_width",
        "input_height", "input_width", "n_shapes",
    ),
    "eval": (
        "seed", "eps_list", "budget", "pairs", "prewarp", "selection", "q", "nms_radius",
        "match_radius", "mutual", "ransac_threshold", "ransac_max_iterations",
        "ransac_confidence", "ransac_min_iterations", "pose_budgets", "scenes",
        "stereo_points", "stereo_noise_px", "stereo_outlier_fraction",
    ),
    "inspect": ("bins", "hist_lo", "hist_hi"),
}

_FLAG_HELP = {
    "prewarp": (
        "Homography suite matching: 'none' (default) matches raw coordinates; 'gt' moves "
        "keypoints of image a through the ground-truth homography first, which leaks the answer "
        "into matching and is for diagnostics only."
    ),
}


def _add_common(parser: argparse.ArgumentParser, command: str) -> None:
    keys = _CONFIG_FLAGS[command]
    for key in keys:
        parser.add_argument(
            f"--{key.replace('_', '-')}",
            dest=key,
            default=None,
            help=_FLAG_HELP.get(key, f"Override config key '{key}'."),
        )
    parser.add_argument("--config", default=None, help="Config file with 'key = value' lines.")
    parser.add_argument("--out", required=True, help="Output directory (receives config.resolved and trace.jsonl).")
    parser.set_defaults(config_keys=keys)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fpcnet",
        description="Descriptor-free keypoint detection, spatial matching, training, and evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"fpcnet {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)

    detect_parser = subparsers.add_parser("detect", help="Run a checkpoint on one PGM image.")
    detect_parser.add_argument("image", help="Path to a binary PGM image.")
    detect_parser.add_argument("--checkpoint", required=True, help="Checkpoint directory (manifest.txt).")
    _add_common(detect_parser, "detect")
    detect_parser.set_defaults(handler=_cmd_detect)

    match_parser = subparsers.add_parser("match", help="Match two keypoint files by proximity and fit a homography.")
    match_parser.add_argument("keypoints_a", help="Keypoint CSV of image a.")
    match_parser.add_argument("keypoints_b", help="Keypoint CSV of image b.")
    match_parser.add_argument("--prewarp", default=None, help="Optional .hom applied to keypoints a before matching.")
    _add_common(match_parser, "match")
    match_parser.set_defaults(handler=_cmd_match)

    train_parser = subparsers.add_parser("train", help="Two-stage training against Harris teacher masks.")
    source = train_parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--synthetic", type=int, default=None, help="Train on N generated shape images.")
    source.add_argument("--data", default=None, help="Directory of .pgm training images.")
    train_parser.add_argument("--stage", choices=("1", "2", "both"), default="both", help="Stages to run.")
    train_parser.add_argument("--resume", default=None, help="Checkpoint directory to start from.")
    _add_common(train_parser, "train")
    train_parser.set_defaults(handler=_cmd_train)

    eval_parser = subparsers.add_parser("eval", help="Run an evaluation suite and write report.csv/report.svg.")
    eval_parser.add_argument("suite", help="Suite name: repeatability, homography, or pose.")
    eval_parser.add_argument(
        "--detector",
        default="harris",
        help="harris, shi-tomasi, oracle, a checkpoint directory, or keypoints:<dir>.",
    )
    eval_parser.add_argument("--data", default=None, help="Pair directory; synthetic pairs when omitted.")
    _add_common(eval_parser, "eval")
    eval_parser.set_defaults(handler=_cmd_eval)

    inspect_parser = subparsers.add_parser("inspect", help="Histogram of raw heatmap activations.")
    inspect_parser.add_argument("heatmap", help="Heatmap tensor (.fpct).")
    _add_common(inspect_parser, "inspect")
    inspect_parser.set_defaults(handler=_cmd_inspect)

    suites_parser = subparsers.add_parser("suites", help="List available evaluation suites.")
    suites_parser.add_argument("--json", action="store_true", help="Print JSON output.")
    suites_parser.set_defaults(handler=_cmd_suites)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return int(args.handler(args))


if __name__ == "__main__":
    raise SystemExit(main())
