"""Command-line frontend: detect / eval / synth / bench.

Frames stream from files in manifest (lexicographic) order with the same
window semantics as the library; ``--follow`` tails the input directory for
frames that arrive while running. Exit codes: 0 success, 2 configuration
error, 3 I/O or data error, 4 internal numerical error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation, synthetic
from .cloud import apply_registration, read_cloud, read_poses, write_cloud
from .config import RunConfig
from .core import SlidingMap, classify_cloud, latency
from .errors import (
    CloudFormatError,
    ConfigError,
    EmptyCloudError,
    NumericalError,
    PoseRangeError,
    SceneError,
)
from .spatial import downsample

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--input", help="input directory of frame files")
    parser.add_argument("--output", help="output directory (or report path for eval)")
    parser.add_argument("--poses", help="pose trajectory file (stamp tx ty tz qx qy qz qw)")
    parser.add_argument("--N", type=int, dest="N",
                        help="frames aggregated on each side of the classified frame")
    parser.add_argument("--radius", type=float, help="neighbor search radius [m]")
    parser.add_argument("--thr", type=float, help="dynamic score threshold in [0, 1]")
    parser.add_argument("--voxel", type=float, help="fixed voxel size [m]")
    parser.add_argument("--auto-voxel-divisor", type=float, dest="auto_voxel_divisor",
                        help="per-frame voxel = bounding-box diagonal / divisor")
    parser.add_argument("--min-neighbors", type=int, dest="min_neighbors")
    parser.add_argument("--min-distinct-frames", type=int, dest="min_distinct_frames")
    parser.add_argument("--upsample-radius", type=float, dest="upsample_radius",
                        help="label transfer radius to full resolution [m]")
    parser.add_argument("--range-limit", type=float, dest="range_limit",
                        help="evaluate only points within this sensor range [m]")
    parser.add_argument("--rate", type=float, help="sensor frame rate [Hz]")
    parser.add_argument("--seed", type=int, help="generator seed override")
    parser.add_argument("--format", choices=("csv", "ply"), help="file format override")
    parser.add_argument("--per-frame-stamp", action="store_true", default=None,
                        dest="per_frame_stamp",
                        help="assign t = frame stamp when inputs lack per-point t")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynodetect",
        description="Classify points of registered range-sensor streams as "
                    "dynamic or static via spatiotemporal surface normals.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_detect = sub.add_parser("detect", help="write per-frame dynamic/static clouds")
    _add_common(p_detect)
    p_detect.add_argument("--follow", action="store_true", default=None,
                          help="keep watching the input directory for new frames")
    p_detect.add_argument("--follow-idle-timeout", type=float, default=None,
                          dest="follow_idle_timeout",
                          help="stop --follow after this many idle seconds")

    p_eval = sub.add_parser("eval", help="evaluate predictions against ground truth")
    _add_common(p_eval)

    p_synth = sub.add_parser("synth", help="generate a synthetic scene to disk")
    _add_common(p_synth)
    p_synth.add_argument("--scene", help="scene file path or bundled scene name")

    p_bench = sub.add_parser("bench", help="time the pipeline stages")
    _add_common(p_bench)
    p_bench.add_argument("--scene", help="scene file path or bundled scene name")
    p_bench.add_argument("--repetitions", type=int)
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config") and v is not None}
    return RunConfig.load(args.config, overrides)


def _frame_files(directory: Path, fmt: str | None):
    suffixes = (".csv", ".ply") if fmt is None else (f".{fmt}",)
    return sorted(p for p in directory.iterdir()
                  if p.suffix.lower() in suffixes and p.name != "labels.csv")


def _pose_pipeline(cfg: RunConfig):
    poses = read_poses(cfg.poses) if cfg.poses else None

    def register(cloud):
        if poses is None:
            return cloud
        return apply_registration(cloud, poses, "linear",
                                  max_extrapolation=1.0 / cfg.rate)
    return poses, register


def cmd_detect(cfg: RunConfig) -> int:
    if not cfg.input:
        raise ConfigError("detect needs --input")
    in_dir = Path(cfg.input)
    if not in_dir.is_dir():
        raise FileNotFoundError(f"input directory not found: {in_dir}")
    out_dir = Path(cfg.output) if cfg.output else in_dir / "detected"
    out_dir.mkdir(parents=True, exist_ok=True)
    params = cfg.params()
    _, register = _pose_pipeline(cfg)

    print(f"latency: N/f = {latency(params, cfg.rate):.3f} s "
          f"(N={params.half_window}, rate={cfg.rate} Hz)")

    sliding = SlidingMap(params.half_window)
    stems: dict[int, str] = {}
    processed: set[str] = set()
    classified = 0
    frame_counter = 0
    idle_since = time.monotonic()

    while True:
        new_files = [p for p in _frame_files(in_dir, cfg.format)
                     if p.name not in processed]
        for path in new_files:
            processed.add(path.name)
            idle_since = time.monotonic()
            fill = frame_counter / cfg.rate if cfg.per_frame_stamp else None
            cloud = read_cloud(path, cfg.format, frame_index=frame_counter,
                               fill_t=fill)
            cloud.validate_stamps(1.0 / cfg.rate)
            cloud = register(cloud)
            stems[frame_counter] = path.stem
            frame_counter += 1
            down = downsample(cloud, params.resolve_voxel_size(cloud))
            target = sliding.push(down)
            if target is None:
                continue
            dynamic, static = classify_cloud(target, sliding, params)
            stem = stems.pop(target.frame_index)
            ext = path.suffix if cfg.format is None else f".{cfg.format}"
            for part, tag in ((dynamic, "dynamic"), (static, "static")):
                out_path = out_dir / f"{stem}_{tag}{ext}"
                if len(part):
                    write_cloud(part, out_path, scores=part.score,
                                labels=part.dynamic)
                else:
                    # preserve the two-output contract even for empty parts
                    out_path.write_text("x,y,z,t,score,label\n", encoding="utf-8") \
                        if out_path.suffix == ".csv" else _write_empty_ply(out_path)
            classified += 1
        if not cfg.follow:
            break
        if time.monotonic() - idle_since > cfg.follow_idle_timeout:
            break
        time.sleep(0.2)

    if classified == 0:
        print(f"warning: window never filled "
              f"({frame_counter} frames < {params.window_length})", file=sys.stderr)
    else:
        print(f"classified {classified} frame(s) -> {out_dir}")
    return EXIT_OK


def _write_empty_ply(path: Path):
    header = ("ply\nformat binary_little_endian 1.0\nelement vertex 0\n"
              "property float x\nproperty float y\nproperty float z\n"
              "property double t\nproperty double score\nproperty uchar label\n"
              "end_header\n")
    path.write_bytes(header.encode("ascii"))


def cmd_eval(cfg: RunConfig) -> int:
    if not cfg.input:
        raise ConfigError("eval needs --input")
    in_dir = Path(cfg.input)
    label_path = in_dir / "labels.csv"
    if not label_path.exists():
        raise FileNotFoundError(f"label file not found: {label_path}")
    sequence = evaluation.load_sequence_dir(
        in_dir, fmt=cfg.format, rate=cfg.rate, per_frame_stamp=cfg.per_frame_stamp)
    if all(labels is None for _, labels in sequence):
        raise FileNotFoundError(f"label file holds no rows: {label_path}")
    params = cfg.params()
    poses, register = _pose_pipeline(cfg)
    sequence = [(register(cloud), labels) for cloud, labels in sequence]

    origin = None
    if cfg.range_limit is not None:
        if poses is not None:
            stamps = {cloud.frame_index: cloud.stamp for cloud, _ in sequence}

            def origin(frame_index, _stamps=stamps, _poses=poses):
                stamp = _stamps[frame_index]
                nearest = min(_poses, key=lambda p: abs(p.stamp - stamp))
                return nearest.translation
        else:
            origin = np.zeros(3)
            print("warning: --range-limit without --poses, measuring range "
                  "from the world origin", file=sys.stderr)

    report, _outputs = evaluation.run_sequence(
        sequence, params, upsample_radius=cfg.upsample_radius,
        range_limit=cfg.range_limit, sensor_origin=origin)
    report.config_echo = cfg.echo()

    out = Path(cfg.output) if cfg.output else in_dir / "report.kv"
    if out.is_dir() or out.suffix == "":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "report.kv"
    report.write_kv(out)
    print(report.to_text(), end="")
    print(f"iou={report.iou:.6f}")
    print(f"report written to {out}")
    return EXIT_OK


def cmd_synth(cfg: RunConfig, scene_arg: str | None) -> int:
    if not scene_arg:
        raise ConfigError("synth needs --scene (bundled name or file path)")
    spec = synthetic.load_scene(scene_arg, seed=cfg.seed)
    if spec.sensor.frames < cfg.params().window_length:
        print(f"warning: scene has {spec.sensor.frames} frames, fewer than the "
              f"{cfg.params().window_length} needed to fill the detection window",
              file=sys.stderr)
    out_dir = Path(cfg.output) if cfg.output else Path.cwd() / "scene_out"
    out_dir.mkdir(parents=True, exist_ok=True)
    fmt = cfg.format or "csv"
    frames = synthetic.generate(spec)
    label_lines = ["frame,point_index,label"]
    for lc in frames:
        write_cloud(lc.cloud, out_dir / f"frame_{lc.cloud.frame_index:06d}.{fmt}")
        for i, lab in enumerate(lc.labels):
            label_lines.append(f"{lc.cloud.frame_index},{i},{1 if lab else 0}")
    (out_dir / "labels.csv").write_text("\n".join(label_lines) + "\n", encoding="utf-8")
    print(f"wrote {len(frames)} frames ({spec.sensor.points_per_frame} points each) "
          f"to {out_dir}")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, scene_arg: str | None) -> int:
    params = cfg.params()
    if scene_arg:
        spec = synthetic.load_scene(scene_arg, seed=cfg.seed)
        sequence = [lc.cloud for lc in synthetic.generate(spec)]
    elif cfg.input:
        sequence = [cloud for cloud, _ in evaluation.load_sequence_dir(
            Path(cfg.input), fmt=cfg.format, rate=cfg.rate,
            per_frame_stamp=cfg.per_frame_stamp)]
    else:
        raise ConfigError("bench needs --scene or --input")
    report = evaluation.bench(sequence, params, repetitions=cfg.repetitions,
                              rate=cfg.rate)
    print(report.to_text(), end="")
    if cfg.output:
        out = Path(cfg.output)
        if out.is_dir() or out.suffix == "":
            out.mkdir(parents=True, exist_ok=True)
            out = out / "bench.kv"
        echo = "".join(f"config_{k}={v}\n" for k, v in sorted(cfg.echo().items()))
        out.write_text(report.to_kv() + echo, encoding="utf-8")
        print(f"report written to {out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        if args.command == "detect":
            return cmd_detect(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "synth":
            return cmd_synth(cfg, getattr(args, "scene", None) or cfg.scene)
        if args.command == "bench":
            return cmd_bench(cfg, getattr(args, "scene", None) or cfg.scene)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, OSError, CloudFormatError, EmptyCloudError,
            SceneError, PoseRangeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
