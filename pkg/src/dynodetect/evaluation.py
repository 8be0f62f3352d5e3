"""IoU evaluation protocol, sequence runner, and throughput benchmarking.

Predictions are made on the downsampled middle frame of the window, then
transferred to the full-resolution frame through a fixed-radius (default
0.5 m) neighborhood before counting. IoU is computed on the dynamic class
only, TP / (TP + FP + FN); an optional range limit excludes points farther
than that from the per-frame sensor origin. Frames the window never covers
(warm-up and tail) are excluded from every count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import Cloud, read_cloud
from .core import Params, ScoredCloud, SlidingMap, classify_cloud, upsample_labels
from .errors import EmptyCloudError
from .spatial import downsample

__all__ = [
    "FrameCounts",
    "EvalReport",
    "BenchReport",
    "compute_iou",
    "run_sequence",
    "bench",
    "load_sequence_dir",
]

_STAGES = ("downsample", "index", "score")


@dataclass(frozen=True)
class FrameCounts:
    """Dynamic-class confusion counts for one evaluated frame."""

    frame_index: int
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def iou(self) -> float:
        denom = self.tp + self.fp + self.fn
        return self.tp / denom if denom else 1.0

    @property
    def vacuous(self) -> bool:
        return (self.tp + self.fp + self.fn) == 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class EvalReport:
    """Aggregate confusion counts, IoU, timing, and run metadata."""

    frames: list[FrameCounts] = field(default_factory=list)
    range_limit: float | None = None
    timing_ms: dict[str, list[float]] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    config_echo: dict[str, str] = field(default_factory=dict)

    @property
    def tp(self) -> int:
        return sum(f.tp for f in self.frames)

    @property
    def fp(self) -> int:
        return sum(f.fp for f in self.frames)

    @property
    def fn(self) -> int:
        return sum(f.fn for f in self.frames)

    @property
    def tn(self) -> int:
        return sum(f.tn for f in self.frames)

    @property
    def iou(self) -> float:
        denom = self.tp + self.fp + self.fn
        return self.tp / denom if denom else 1.0

    @property
    def vacuous(self) -> bool:
        return (self.tp + self.fp + self.fn) == 0

    def add_frame(self, counts: FrameCounts):
        self.frames.append(counts)

    def merge(self, other: "EvalReport") -> "EvalReport":
        out = EvalReport(frames=self.frames + other.frames,
                         range_limit=self.range_limit,
                         flags=sorted(set(self.flags + other.flags)),
                         config_echo=dict(self.config_echo))
        for key in set(self.timing_ms) | set(other.timing_ms):
            out.timing_ms[key] = self.timing_ms.get(key, []) + other.timing_ms.get(key, [])
        return out

    def to_kv(self) -> str:
        lines = [
            f"frames_evaluated={len(self.frames)}",
            f"tp={self.tp}", f"fp={self.fp}", f"fn={self.fn}", f"tn={self.tn}",
            f"iou={self.iou:.6f}",
            f"vacuous={'true' if self.vacuous else 'false'}",
        ]
        if self.range_limit is not None:
            lines.append(f"range_limit={self.range_limit}")
        for flag in self.flags:
            lines.append(f"flag={flag}")
        for stage, samples in sorted(self.timing_ms.items()):
            if samples:
                lines.append(f"time_{stage}_median_ms={float(np.median(samples)):.3f}")
        for key, value in sorted(self.config_echo.items()):
            lines.append(f"config_{key}={value}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = [f"frames evaluated: {len(self.frames)}"]
        if self.range_limit is not None:
            lines.append(f"range limit: {self.range_limit} m")
        lines.append(f"counts: TP={self.tp} FP={self.fp} FN={self.fn} TN={self.tn}")
        iou_note = " (vacuous: no dynamic points anywhere)" if self.vacuous else ""
        lines.append(f"IoU (dynamic class): {self.iou:.4f}{iou_note}")
        for flag in self.flags:
            lines.append(f"flag: {flag}")
        for stage, samples in sorted(self.timing_ms.items()):
            if samples:
                lines.append(f"{stage}: median {np.median(samples):.2f} ms, "
                             f"p95 {np.percentile(samples, 95):.2f} ms")
        return "\n".join(lines) + "\n"

    def write_kv(self, path):
        Path(path).write_text(self.to_kv(), encoding="utf-8")


def compute_iou(predicted, truth, ranges=None, range_limit: float | None = None,
                frame_index: int = 0) -> EvalReport:
    """Confusion counts and IoU for one frame of per-point labels.

    ``predicted`` and ``truth`` are boolean (or 0/1) arrays of equal length;
    True marks the dynamic class. With ``range_limit`` set, points whose
    ``ranges`` entry exceeds it are excluded from every count.
    """
    predicted = np.asarray(predicted).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if predicted.shape != truth.shape:
        raise ValueError(
            f"label arrays differ in length: {predicted.shape} vs {truth.shape}")
    if range_limit is not None:
        if ranges is None:
            raise ValueError("range_limit set but no per-point ranges given")
        ranges = np.asarray(ranges, dtype=np.float64)
        if ranges.shape != predicted.shape:
            raise ValueError(
                f"ranges length {ranges.shape} does not match labels {predicted.shape}")
        keep = ranges <= range_limit
        predicted, truth = predicted[keep], truth[keep]
    counts = FrameCounts(
        frame_index=frame_index,
        tp=int(np.sum(predicted & truth)),
        fp=int(np.sum(predicted & ~truth)),
        fn=int(np.sum(~predicted & truth)),
        tn=int(np.sum(~predicted & ~truth)),
    )
    report = EvalReport(range_limit=range_limit)
    report.add_frame(counts)
    if counts.vacuous:
        report.flags.append("vacuous")
    return report


@dataclass
class FrameOutput:
    """Classification products for one evaluated frame."""

    frame_index: int
    dynamic: ScoredCloud
    static: ScoredCloud
    full_labels: np.ndarray | None = None


def run_sequence(sequence, params: Params, *, upsample_radius: float = 0.5,
                 range_limit: float | None = None, sensor_origin=None,
                 progress=None) -> tuple[EvalReport, list[FrameOutput]]:
    """Run the detection pipeline over a frame sequence and evaluate it.

    ``sequence`` yields (Cloud, truth labels or None) pairs or LabeledCloud
    objects. Truth labels align with the full-resolution clouds; predictions
    are upsampled back to full resolution before counting. ``sensor_origin``
    supplies the per-frame origin for the range cut: a 3-vector, or a
    mapping/callable from frame_index.
    """
    sliding = SlidingMap(params.half_window)
    report = EvalReport(range_limit=range_limit)
    outputs: list[FrameOutput] = []
    raw_frames: dict[int, tuple[Cloud, np.ndarray | None]] = {}
    timing = {stage: [] for stage in _STAGES}
    evaluated = False

    for item in sequence:
        if isinstance(item, tuple):
            cloud, truth = item
        else:
            cloud, truth = item.cloud, getattr(item, "labels", None)
        raw_frames[cloud.frame_index] = (cloud, truth)

        t0 = time.perf_counter()
        voxel = params.resolve_voxel_size(cloud)
        down = downsample(cloud, voxel)
        t1 = time.perf_counter()
        target = sliding.push(down)
        if sliding.full:
            sliding.prepare(params.radius)
        t2 = time.perf_counter()
        timing["downsample"].append((t1 - t0) * 1e3)
        timing["index"].append((t2 - t1) * 1e3)

        if target is None:
            continue
        t3 = time.perf_counter()
        dynamic, _static = classify_cloud(target, sliding, params)
        t4 = time.perf_counter()
        timing["score"].append((t4 - t3) * 1e3)

        full_cloud, truth = raw_frames.pop(target.frame_index)
        for stale in [k for k in raw_frames if k < target.frame_index]:
            del raw_frames[stale]
        predicted = upsample_labels(full_cloud, dynamic, upsample_radius)
        outputs.append(FrameOutput(frame_index=target.frame_index, dynamic=dynamic,
                                   static=_static, full_labels=predicted))

        if truth is not None:
            ranges = None
            if range_limit is not None:
                origin = _origin_for(sensor_origin, target.frame_index)
                ranges = np.linalg.norm(full_cloud.xyz - origin, axis=1)
            frame_report = compute_iou(predicted, truth, ranges=ranges,
                                       range_limit=range_limit,
                                       frame_index=target.frame_index)
            report.frames.extend(frame_report.frames)
            evaluated = True
        if progress is not None:
            progress(target.frame_index)

    raw_frames.clear()
    report.timing_ms = timing
    if not outputs:
        report.flags.append("no-frames-evaluated")
    elif not evaluated:
        report.flags.append("no-truth-labels")
    if report.vacuous and evaluated:
        report.flags.append("vacuous")
    return report, outputs


def _origin_for(sensor_origin, frame_index: int) -> np.ndarray:
    if sensor_origin is None:
        raise ValueError("range_limit needs a sensor origin to measure ranges from")
    if callable(sensor_origin):
        return np.asarray(sensor_origin(frame_index), dtype=np.float64)
    if isinstance(sensor_origin, dict):
        return np.asarray(sensor_origin[frame_index], dtype=np.float64)
    return np.asarray(sensor_origin, dtype=np.float64).reshape(3)


@dataclass
class BenchReport:
    """Per-stage wall-clock distributions over a benchmark run."""

    stage_samples_ms: dict[str, list[list[float]]]
    frame_period_ms: float
    frame_indices: list[int] = field(default_factory=list)

    def median(self, stage: str) -> float:
        return float(np.median(np.concatenate(
            [np.asarray(s) for s in self.stage_samples_ms[stage]])))

    def p95(self, stage: str) -> float:
        return float(np.percentile(np.concatenate(
            [np.asarray(s) for s in self.stage_samples_ms[stage]]), 95))

    @property
    def total_per_frame_ms(self) -> np.ndarray:
        """Per-frame pipeline totals (downsample + index + score), all reps.

        Only frames where every stage ran (i.e. a classification happened)
        contribute, so warm-up frames do not skew the distribution.
        """
        totals = []
        for rep_idx in range(len(self.stage_samples_ms["score"])):
            score = np.asarray(self.stage_samples_ms["score"][rep_idx])
            n = score.size
            ds = np.asarray(self.stage_samples_ms["downsample"][rep_idx])[-n:] if n else []
            ix = np.asarray(self.stage_samples_ms["index"][rep_idx])[-n:] if n else []
            if n:
                totals.append(ds + ix + score)
        return np.concatenate(totals) if totals else np.empty(0)

    @property
    def median_total_ms(self) -> float:
        totals = self.total_per_frame_ms
        return float(np.median(totals)) if totals.size else float("nan")

    def over_budget_frames(self) -> int:
        totals = self.total_per_frame_ms
        return int(np.sum(totals > self.frame_period_ms))

    def to_kv(self) -> str:
        lines = []
        for stage in sorted(self.stage_samples_ms):
            flat = np.concatenate([np.asarray(s) for s in self.stage_samples_ms[stage]])
            if flat.size:
                lines.append(f"{stage}_median_ms={np.median(flat):.3f}")
                lines.append(f"{stage}_p95_ms={np.percentile(flat, 95):.3f}")
        totals = self.total_per_frame_ms
        if totals.size:
            lines.append(f"total_median_ms={np.median(totals):.3f}")
            lines.append(f"total_p95_ms={np.percentile(totals, 95):.3f}")
        lines.append(f"frame_period_ms={self.frame_period_ms:.3f}")
        lines.append(f"frames_over_period={self.over_budget_frames()}")
        lines.append(f"repetitions={len(self.stage_samples_ms['score'])}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = ["stage            median       p95"]
        for stage in _STAGES:
            flat = np.concatenate([np.asarray(s) for s in self.stage_samples_ms[stage]])
            if flat.size:
                lines.append(f"{stage:<12} {np.median(flat):>9.2f} ms {np.percentile(flat, 95):>9.2f} ms")
        totals = self.total_per_frame_ms
        if totals.size:
            lines.append(f"{'total':<12} {np.median(totals):>9.2f} ms {np.percentile(totals, 95):>9.2f} ms")
        over = self.over_budget_frames()
        lines.append(f"frame period {self.frame_period_ms:.1f} ms; "
                     f"{over} frame(s) over budget")
        return "\n".join(lines) + "\n"


def bench(sequence, params: Params, repetitions: int = 1,
          rate: float = 10.0) -> BenchReport:
    """Time the pipeline stages over ``sequence`` for ``repetitions`` passes.

    ``sequence`` is a list of Clouds (or LabeledClouds); ground truth is
    ignored. Frames exceeding the frame period implied by ``rate`` are
    counted in the report.
    """
    if repetitions < 1:
        raise ValueError(f"repetitions must be >= 1, got {repetitions}")
    if rate <= 0:
        raise ValueError(f"rate must be > 0, got {rate}")
    frames = [item.cloud if hasattr(item, "cloud") else item for item in sequence]
    samples = {stage: [] for stage in _STAGES}
    frame_indices = []
    for _ in range(repetitions):
        report, outputs = run_sequence(((c, None) for c in frames), params)
        for stage in _STAGES:
            samples[stage].append(report.timing_ms[stage])
        frame_indices = [o.frame_index for o in outputs]
    return BenchReport(stage_samples_ms=samples, frame_period_ms=1e3 / rate,
                       frame_indices=frame_indices)


def load_sequence_dir(path, *, fmt: str | None = None, rate: float | None = None,
                      per_frame_stamp: bool = False):
    """Load a directory of frame files (plus optional labels.csv sidecar).

    Frame files are taken in lexicographic order; ``labels.csv`` rows are
    ``frame,point_index,label`` with label 1 = dynamic. Returns a list of
    (Cloud, labels or None).
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"sequence directory not found: {path}")
    files = sorted(p for p in path.iterdir()
                   if p.suffix.lower() in (".csv", ".ply") and p.name != "labels.csv")
    if not files:
        raise EmptyCloudError(f"no frame files in {path}")
    labels_by_frame = {}
    label_path = path / "labels.csv"
    if label_path.exists():
        raw = np.loadtxt(label_path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        for frame in np.unique(raw[:, 0]):
            rows = raw[raw[:, 0] == frame]
            labels = np.zeros(int(rows[:, 1].max()) + 1, dtype=bool)
            labels[rows[:, 1]] = rows[:, 2] != 0
            labels_by_frame[int(frame)] = labels
    sequence = []
    for i, file in enumerate(files):
        fill = (i / rate) if (per_frame_stamp and rate) else None
        cloud = read_cloud(file, fmt, frame_index=i, fill_t=fill)
        labels = labels_by_frame.get(i)
        if labels is not None and labels.size != len(cloud):
            labels = _fit_labels(labels, len(cloud))
        sequence.append((cloud, labels))
    return sequence


def _fit_labels(labels: np.ndarray, n: int) -> np.ndarray:
    if labels.size < n:
        out = np.zeros(n, dtype=bool)
        out[:labels.size] = labels
        return out
    return labels[:n]
