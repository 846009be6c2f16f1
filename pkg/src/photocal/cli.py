"""Command line front end.

Subcommands ``synth``, ``calibrate``, ``rectify``, ``pose`` and ``eval``.
Every setting can come from a flag or from a ``key = value`` file passed
with ``--config``; flags win. Exit codes: 0 success, 2 configuration
error, 3 data error, 4 unobservable or not converged.

Log verbosity is read from ``PHOTOCAL_LOG`` (DEBUG, INFO, WARNING, ERROR).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Any, Callable

import numpy as np

from . import formats
from .calibrator import CalibrationConfig, Phase, run_pipeline
from .errors import DataError, FormatError, GenerationError, ModelError, PhotocalError
from .evaluation import Trajectory, cumulative_error_curve, evaluate_run
from .formats import DatasetLayout
from .photometry import CalibrationSnapshot, rectify_frame
from .pose import PoseConfig, optimize_pose, pair_observation, perturb
from .synth import SceneSpec, generate_scene, render_frame
from .tracker import FeatureTracker

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_FAILED = 4

LOG_ENV = "PHOTOCAL_LOG"

log = logging.getLogger("photocal.cli")


class ConfigError(PhotocalError):
    """Invalid, unknown or missing setting."""


# -- settings ---------------------------------------------------------------------


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _paths(s: str) -> tuple[str, ...]:
    items = tuple(p.strip() for p in s.split(",") if p.strip())
    if not items:
        raise ValueError("expected at least one path")
    return items


@dataclass(frozen=True)
class Option:
    key: str
    parse: Callable[[str], Any]
    default: Any = None
    help: str = ""
    check: Callable[[Any], bool] | None = None
    rule: str = ""
    choices: tuple[str, ...] | None = None
    required: bool = False


def _positive(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _at_least(n):
    return lambda x: x >= n


_SYNTH = (
    Option("out", str, required=True, help="output dataset directory"),
    Option("seed", int, 0, "scene seed", _nonneg, ">= 0"),
    Option("frames", int, 200, "number of frames", _at_least(2), ">= 2"),
    Option("width", int, 160, "image width", _at_least(16), ">= 16"),
    Option("height", int, 120, "image height", _at_least(16), ">= 16"),
    Option("exposure_min", float, 1.0, "shortest exposure (ms)", _positive, "> 0"),
    Option("exposure_max", float, 8.0, "longest exposure (ms)", _positive, "> 0"),
    Option("response", str, "gamma", "response family", choices=("gamma", "identity")),
    Option("gamma", float, 2.2, "exponent of the gamma response", _positive, "> 0"),
    Option("vignette_a2", float, -0.25, "vignette r^2 coefficient"),
    Option("vignette_a4", float, -0.1, "vignette r^4 coefficient"),
    Option("vignette_a6", float, -0.05, "vignette r^6 coefficient"),
    Option("noise_sigma", float, 1.0, "pre-quantization noise (intensity levels)", _nonneg, ">= 0"),
    Option("texture", str, "noise", "radiance texture", choices=("noise", "checkerboard")),
    Option("trajectory", str, "lissajous", "camera path", choices=("lissajous", "line", "static")),
)

_CALIBRATE = (
    Option("data", str, required=True, help="dataset directory"),
    Option("out", str, required=True, help="output directory"),
    Option("epsilon", float, 0.02, "validation threshold on the relative exposure-ratio error"),
    Option("window", int, 30, "validation window (frame pairs)"),
    Option("pass_fraction", float, 0.9, "fraction of the window that must pass"),
    Option("rho", float, 0.02, "same-radius threshold (normalized radius)"),
    Option("smoothness", float, 1e-3, "response smoothness weight"),
    Option("min_crf_pairs", int, 2000, "pairs needed before estimating the response"),
    Option("min_vignette_pairs", int, 2000, "pairs needed before estimating the vignette"),
    Option("retry_every", int, 10, "frames between estimation attempts"),
    Option("max_features", int, 150, "tracked features", _at_least(1), ">= 1"),
)

_CALIB_SOURCE = (
    Option("calib", str, help="directory holding pcalib.txt and vignette.pgm"),
    Option("identity", _bool, False, "use the identity calibration instead of --calib"),
)

_RECTIFY = (
    Option("data", str, required=True, help="dataset directory"),
    Option("out", str, required=True, help="output directory"),
    *_CALIB_SOURCE,
    Option("scale", float, 1.0, "16-bit value = round(65535 * scale * irradiance)", _positive, "> 0"),
)

_POSE = (
    Option("data", str, required=True, help="synthetic dataset directory"),
    Option("out", str, required=True, help="output directory"),
    *_CALIB_SOURCE,
    Option("scene", str, help="scene description (default DATA/gt/scene.json)"),
    Option("seed", int, 0, "seed of the start perturbations", _nonneg, ">= 0"),
    Option("start", int, 0, "first frame", _nonneg, ">= 0"),
    Option("pairs", int, 10, "number of consecutive frame pairs", _at_least(1), ">= 1"),
    Option("gap", int, 1, "frame gap within a pair", _at_least(1), ">= 1"),
    Option("perturb_rot_deg", float, 2.0, "start rotation error (degrees)", _nonneg, ">= 0"),
    Option("perturb_trans", float, 0.05, "start translation error (fraction of mean depth)", _nonneg, ">= 0"),
    Option("delta_p", float, 9.0, "photometric Huber threshold (intensity levels)"),
    Option("delta_g", float, 3.0, "geometric Huber threshold (px)"),
    Option("levels", int, 4, "pyramid levels"),
    Option("max_iterations", int, 30, "iterations per level"),
    Option("points", int, 800, "photometric points", _at_least(1), ">= 1"),
    Option("keypoints", int, 100, "keypoints", _nonneg, ">= 0"),
    Option("blur", float, 1.0, "Gaussian pre-filter sigma (px)", _nonneg, ">= 0"),
)

_EVAL = (
    Option("estimate", _paths, required=True, help="estimated trajectory files (comma separated in a config file)"),
    Option("reference", str, required=True, help="reference trajectory file"),
    Option("out", str, required=True, help="metrics CSV"),
    Option("mode", str, "similarity", "alignment", choices=("similarity", "rigid")),
    Option("curve", str, help="optional CSV of the cumulative ATE curve"),
    Option("curve_points", int, 21, "thresholds in the curve", _at_least(2), ">= 2"),
)

OPTIONS: dict[str, tuple[Option, ...]] = {
    "synth": _SYNTH,
    "calibrate": _CALIBRATE,
    "rectify": _RECTIFY,
    "pose": _POSE,
    "eval": _EVAL,
}


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings of one invocation."""

    command: str
    values: MappingProxyType

    def __getitem__(self, key: str):
        return self.values[key]


def read_config_file(path, command: str) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    known = {o.key: o for o in OPTIONS[command]}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"{path}: cannot read config file ({err.strerror})") from None
    out: dict[str, Any] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{path}:{n}: unknown key {key!r} for {command}")
        if key in out:
            raise ConfigError(f"{path}:{n}: duplicate key {key!r}")
        try:
            out[key] = known[key].parse(value)
        except ValueError as err:
            raise ConfigError(f"{path}:{n}: {key}: {err}") from None
    return out


def resolve_config(command: str, flags: dict[str, Any], config_file=None) -> RunConfig:
    """Merge defaults, the config file and flags (in increasing priority) and validate."""
    values = {o.key: o.default for o in OPTIONS[command]}
    if config_file is not None:
        values.update(read_config_file(config_file, command))
    values.update({k: v for k, v in flags.items() if v is not None})
    for o in OPTIONS[command]:
        v = values[o.key]
        if o.required and v is None:
            raise ConfigError(f"missing required setting {o.key!r}")
        if v is None:
            continue
        if o.choices is not None and v not in o.choices:
            raise ConfigError(f"{o.key}: {v!r} is not one of {', '.join(o.choices)}")
        if o.check is not None and not o.check(v):
            raise ConfigError(f"{o.key}: {v!r} out of range (must be {o.rule})")
    if command == "synth" and values["exposure_min"] > values["exposure_max"]:
        raise ConfigError("exposure_min must not exceed exposure_max")
    if command in ("rectify", "pose") and (values["calib"] is None) == (not values["identity"]):
        raise ConfigError("give exactly one of calib or identity")
    return RunConfig(command, MappingProxyType(values))


# -- commands ---------------------------------------------------------------------


def _makedirs(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise ConfigError(f"{p}: cannot create output directory ({err.strerror})") from None
    return p


def cmd_synth(cfg: RunConfig) -> int:
    try:
        spec = SceneSpec(
            width=cfg["width"],
            height=cfg["height"],
            n_frames=cfg["frames"],
            exposure_range=(cfg["exposure_min"], cfg["exposure_max"]),
            response=cfg["response"],
            gamma=cfg["gamma"],
            vignette=(cfg["vignette_a2"], cfg["vignette_a4"], cfg["vignette_a6"]),
            noise_sigma=cfg["noise_sigma"],
            texture=cfg["texture"],
            trajectory=cfg["trajectory"],
            seed=cfg["seed"],
        )
        scene = generate_scene(spec)
    except (ModelError, GenerationError, ValueError) as err:
        raise ConfigError(f"scene: {err}") from None
    layout = DatasetLayout(_makedirs(cfg["out"]))
    if layout.image_dir.is_dir() and any(layout.image_dir.glob("*.pgm")):
        raise ConfigError(f"{layout.image_dir}: already contains images")
    for i in range(scene.n_frames):
        layout.write_frame(render_frame(scene, i))
    formats.write_times(layout.times, scene.exposure_records())
    formats.write_camera(layout.camera, scene.camera)
    gt = _makedirs(Path(cfg["out"]) / "gt")
    formats.write_scene_spec(gt / "scene.json", spec)
    formats.write_response(gt / "pcalib.txt", scene.response)
    formats.write_vignette_image(gt / "vignette.pgm", scene.vignette, scene.shape)
    formats.write_trajectory(gt / "trajectory.txt", _trajectory(scene.timestamps, scene.poses))
    formats.write_camera(gt / "camera.txt", scene.camera)
    log.info("wrote %d frames to %s", scene.n_frames, cfg["out"])
    return EXIT_OK


def _trajectory(timestamps, poses) -> Trajectory:
    return Trajectory(np.asarray(timestamps, dtype=np.float64), tuple(poses))


def cmd_calibrate(cfg: RunConfig) -> int:
    try:
        config = CalibrationConfig(
            epsilon=cfg["epsilon"],
            window=cfg["window"],
            pass_fraction=cfg["pass_fraction"],
            rho=cfg["rho"],
            smoothness=cfg["smoothness"],
            min_crf_pairs=cfg["min_crf_pairs"],
            min_vignette_pairs=cfg["min_vignette_pairs"],
            retry_every=cfg["retry_every"],
        )
    except ValueError as err:
        raise ConfigError(str(err)) from None
    frames = DatasetLayout(cfg["data"]).read_frames()
    out = _makedirs(cfg["out"])
    lines: list[str] = []

    def record(frame, state):
        k_err = state.window[-1].relative_error if state.window else float("nan")
        lines.append(f"frame {frame.frame_id} phase={state.phase.label} pairs={state.pair_count()} k_err={k_err:.6f}")

    state = run_pipeline(frames, config, FeatureTracker(max_count=cfg["max_features"]), record)
    if state.phase == Phase.FROZEN:
        rep = state.snapshot.report
        lines.append(
            f"frozen k={rep.k!r} expected={rep.expected!r} relative_error={rep.relative_error!r} "
            f"n={rep.n} pass_rate={rep.pass_rate!r}"
        )
    else:
        lines.append(f"not frozen phase={state.phase.label} reason={state.last_error}")
    (out / "validation.log").write_text("\n".join(lines) + "\n", encoding="ascii")
    if state.phase != Phase.FROZEN:
        if state.unobservable:
            print(f"photocal: unobservable: {state.last_error}", file=sys.stderr)
        else:
            print(
                f"photocal: not converged after {len(frames)} frames "
                f"(phase {state.phase.label}: {state.last_error})",
                file=sys.stderr,
            )
        return EXIT_FAILED
    formats.write_response(out / "pcalib.txt", state.snapshot.response)
    formats.write_vignette_image(out / "vignette.pgm", state.snapshot.vignette, frames[0].shape)
    log.info("calibration frozen after frame %d", state.last_frame_id)
    return EXIT_OK


def _snapshot(cfg: RunConfig) -> CalibrationSnapshot:
    if cfg["identity"]:
        return CalibrationSnapshot.identity()
    root = Path(cfg["calib"])
    ir = formats.read_response(root / "pcalib.txt")
    _, v = formats.read_vignette_image(root / "vignette.pgm")
    return CalibrationSnapshot(ir, v, frozen=True)


def cmd_rectify(cfg: RunConfig) -> int:
    snap = _snapshot(cfg)
    frames = DatasetLayout(cfg["data"]).read_frames()
    out = _makedirs(cfg["out"])
    (out / "images").mkdir(exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    clipped = 0
    for f in frames:
        rect = rectify_frame(f, snap)
        q = np.floor(65535.0 * cfg["scale"] * rect.values + 0.5)
        over = q > 65535
        clipped += int(np.count_nonzero(over & rect.valid))
        name = f"{f.frame_id:05d}.pgm"
        formats.write_pgm(out / "images" / name, np.minimum(q, 65535).astype(np.uint16), 65535)
        formats.write_pgm(out / "masks" / name, np.where(rect.valid & ~over, 255, 0).astype(np.uint8), 255)
    if clipped:
        log.warning("%d valid pixels exceeded the 16-bit range and were masked; lower scale", clipped)
    log.info("rectified %d frames", len(frames))
    return EXIT_OK


def cmd_pose(cfg: RunConfig) -> int:
    try:
        pcfg = PoseConfig(
            delta_p=cfg["delta_p"],
            delta_g=cfg["delta_g"],
            levels=cfg["levels"],
            max_iterations=cfg["max_iterations"],
        )
    except ValueError as err:
        raise ConfigError(str(err)) from None
    snap = _snapshot(cfg)
    scene_path = Path(cfg["scene"]) if cfg["scene"] else Path(cfg["data"]) / "gt" / "scene.json"
    spec = formats.read_scene_spec(scene_path)
    scene = generate_scene(spec, check_saturation=False)
    frames = DatasetLayout(cfg["data"]).read_frames()
    if len(frames) != scene.n_frames:
        raise DataError(f"{scene_path}: scene has {scene.n_frames} frames, dataset has {len(frames)}")
    start, gap, n = cfg["start"], cfg["gap"], cfg["pairs"]
    last = start + n * gap
    if last >= len(frames):
        raise ConfigError(f"pairs end at frame {last}, dataset has {len(frames)} frames")
    out = _makedirs(cfg["out"])
    poses = [scene.poses[start]]
    report: list[str] = []
    failed = []
    for p in range(n):
        i, j = start + p * gap, start + (p + 1) * gap
        gt = scene.relative_pose(i, j)
        depth = float(np.mean(scene.depth_map(i)))
        rng = np.random.default_rng([cfg["seed"], p])
        init = perturb(gt, rng, cfg["perturb_rot_deg"], cfg["perturb_trans"] * depth)
        obs = pair_observation(scene, frames[i], frames[j], snap, cfg["points"], cfg["keypoints"], cfg["blur"])
        res = optimize_pose(obs, init, pcfg)
        err = res.pose @ gt.inverse()
        report.append(
            f"pair {i} {j} converged {'yes' if res.report.converged else 'no'} "
            f"rot_err_deg {err.rotation_deg():.6f} trans_err_pct {100 * np.linalg.norm(err.t) / depth:.6f}"
        )
        if res.report.message:
            report.append(f"note {res.report.message}")
        report.append(res.report.text())
        if not res.report.converged:
            failed.append((i, j))
        # relative pose maps reference-camera points into the target camera
        poses.append(poses[-1] @ res.pose.inverse())
    stamps = [frames[start + p * gap].exposure_record.timestamp for p in range(n + 1)]
    formats.write_trajectory(out / "trajectory.txt", _trajectory(stamps, poses))
    (out / "convergence.txt").write_text("\n".join(report) + "\n", encoding="ascii")
    if failed:
        print(f"photocal: not converged for frame pairs {failed}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def _fmt(x: float) -> str:
    s = f"{x:.9f}"
    return "0.000000000" if s == "-0.000000000" else s


def cmd_eval(cfg: RunConfig) -> int:
    ref = formats.read_trajectory(cfg["reference"])
    rows = []
    for path in cfg["estimate"]:
        est = formats.read_trajectory(path)
        rows.append(evaluate_run(str(path), est, ref, cfg["mode"]))
    with open(cfg["out"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "ate_rmse", "rot_drift_deg", "trans_drift_pct"])
        for r in rows:
            w.writerow([r.run, _fmt(r.ate_rmse), _fmt(r.rot_drift_deg), _fmt(r.trans_drift_pct)])
    if cfg["curve"]:
        ates = [r.ate_rmse for r in rows]
        thresholds = np.linspace(0.0, max(max(ates), 1e-12), cfg["curve_points"])
        frac = cumulative_error_curve(ates, thresholds)
        with open(cfg["curve"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["ate_threshold", "fraction"])
            w.writerows([_fmt(t), _fmt(f)] for t, f in zip(thresholds, frac))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "calibrate": cmd_calibrate,
    "rectify": cmd_rectify,
    "pose": cmd_pose,
    "eval": cmd_eval,
}

_HELP = {
    "synth": "render a synthetic dataset with ground truth",
    "calibrate": "estimate response and vignette from a dataset",
    "rectify": "write rectified 16-bit irradiance images and masks",
    "pose": "refine frame-to-frame poses on a synthetic dataset",
    "eval": "trajectory error metrics as CSV",
}


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="key = value settings file (flags win)")
    common.add_argument("--log-file", metavar="FILE", help="write log records to FILE instead of stderr")
    common.add_argument("--no-timestamps", action="store_true", help="omit timestamps from log records")
    parser = argparse.ArgumentParser(prog="photocal", description="Photometric calibration and pose refinement.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, options in OPTIONS.items():
        p = sub.add_parser(name, parents=[common], help=_HELP[name], description=_HELP[name])
        for o in options:
            flag = "--" + o.key.replace("_", "-")
            if o.parse is _bool:
                p.add_argument(flag, dest=o.key, action="store_const", const=True, default=None, help=o.help)
            elif o.parse is _paths:
                p.add_argument(flag, dest=o.key, nargs="+", default=None, metavar="PATH", help=o.help)
            else:
                extra = {"choices": o.choices} if o.choices else {}
                default = "" if o.default is None else f" (default {o.default})"
                p.add_argument(flag, dest=o.key, type=o.parse, default=None, help=o.help + default, **extra)
    return parser


def configure_logging(log_file=None, timestamps: bool = True) -> None:
    level_name = os.environ.get(LOG_ENV, "WARNING").strip().upper()
    level = logging.getLevelName(level_name)
    if not isinstance(level, int):
        raise ConfigError(f"{LOG_ENV}={level_name!r} is not a log level")
    root = logging.getLogger("photocal")
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    if log_file:
        try:
            Path(log_file).parent.mkdir(parents=True, exist_ok=True)
            handler: logging.Handler = logging.FileHandler(log_file, mode="w", encoding="utf-8")
        except OSError as err:
            raise ConfigError(f"{log_file}: cannot open log file ({err.strerror})") from None
    else:
        handler = logging.StreamHandler()
    fmt = "%(levelname)s %(name)s: %(message)s"
    handler.setFormatter(logging.Formatter(("%(asctime)s " if timestamps else "") + fmt))
    root.addHandler(handler)
    root.setLevel(level)
    root.propagate = False


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = {o.key: getattr(args, o.key) for o in OPTIONS[args.command]}
    if isinstance(flags.get("estimate"), list):
        flags["estimate"] = tuple(flags["estimate"])
    try:
        configure_logging(args.log_file, not args.no_timestamps)
        cfg = resolve_config(args.command, flags, args.config)
        return COMMANDS[args.command](cfg)
    except ConfigError as err:
        print(f"photocal: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, DataError, OSError) as err:
        print(f"photocal: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except PhotocalError as err:
        print(f"photocal: error: {err}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
