"""Sliding-window map, per-point motion scoring, and classification.

The detector aggregates the last ``2N + 1`` downsampled frames into a map.
Each point of the middle frame is scored by the absolute temporal component
of the unit eigenvector belonging to the smallest eigenvalue of its local
4D ([x, y, z, t]) neighborhood covariance: 0 for points on static surfaces,
approaching 1 for fast motion along the local surface normal. Points whose
neighborhood is degenerate (too few neighbors, or a single frame, which
would make the time axis itself the flattest direction and yield a spurious
score of 1) are marked invalid and classified static.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .cloud import Cloud, TimedPoint
from .eigen import smallest_eigenvector
from .errors import FrameOrderError, WindowNotFullError
from .spatial import KdIndex, auto_voxel_size, voxel_keys

__all__ = [
    "Params",
    "ScoredPoint",
    "ScoredCloud",
    "SlidingMap",
    "push_cloud",
    "spatiotemporal_covariance",
    "dynamic_score",
    "score_cloud",
    "classify_cloud",
    "upsample_labels",
    "latency",
]

LABEL_DYNAMIC = "dynamic"
LABEL_STATIC = "static"


@dataclass(frozen=True)
class Params:
    """Detection parameters.

    radius: neighbor-search radius in meters.
    threshold: dynamic-score cutoff in [0, 1]; a point is dynamic when its
        score strictly exceeds it.
    half_window: frames aggregated on each side of the classified frame
        (window length is 2 * half_window + 1).
    voxel_size / voxel_divisor: fixed voxel edge in meters, or per-frame
        edge = bounding-box diagonal / divisor. Exactly one must be set.
    min_neighbors / min_distinct_frames: degenerate-neighborhood guards.
    time_scale: experimental multiplier applied to timestamps before the
        covariance; scores are unit-dependent, leave at 1.0 for seconds.
    """

    radius: float = 0.3
    threshold: float = 0.25
    half_window: int = 10
    voxel_size: float | None = None
    voxel_divisor: float | None = 600.0
    min_neighbors: int = 5
    min_distinct_frames: int = 2
    time_scale: float = 1.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"radius must be > 0, got {self.radius}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [0, 1], got {self.threshold}")
        if self.half_window < 1:
            raise ValueError(f"half_window must be >= 1, got {self.half_window}")
        if (self.voxel_size is None) == (self.voxel_divisor is None):
            raise ValueError("exactly one of voxel_size or voxel_divisor must be set")
        if self.voxel_size is not None and self.voxel_size <= 0:
            raise ValueError(f"voxel_size must be > 0, got {self.voxel_size}")
        if self.voxel_divisor is not None and self.voxel_divisor <= 0:
            raise ValueError(f"voxel_divisor must be > 0, got {self.voxel_divisor}")
        if self.min_neighbors < 4:
            raise ValueError("min_neighbors must be >= 4 (a 4D covariance needs "
                             f"at least 4 samples), got {self.min_neighbors}")
        if self.min_distinct_frames < 2:
            raise ValueError(f"min_distinct_frames must be >= 2, got {self.min_distinct_frames}")
        if self.time_scale <= 0:
            raise ValueError(f"time_scale must be > 0, got {self.time_scale}")

    @property
    def window_length(self) -> int:
        return 2 * self.half_window + 1

    def resolve_voxel_size(self, cloud: Cloud) -> float:
        if self.voxel_size is not None:
            return self.voxel_size
        return auto_voxel_size(cloud, self.voxel_divisor)


@dataclass(frozen=True)
class ScoredPoint:
    """A point with its dynamic score, validity flag, and label."""

    point: TimedPoint
    score: float
    valid: bool
    label: str

    @property
    def dynamic(self) -> bool:
        return self.label == LABEL_DYNAMIC


class ScoredCloud:
    """Array-backed scoring result for one frame, in input point order."""

    __slots__ = ("frame_index", "stamp", "xyz", "t", "score", "valid", "dynamic",
                 "n_neighbors", "n_frames", "gap_ratio")

    def __init__(self, frame_index, stamp, xyz, t, score, valid, dynamic,
                 n_neighbors=None, n_frames=None, gap_ratio=None):
        self.frame_index = frame_index
        self.stamp = stamp
        self.xyz = xyz
        self.t = t
        self.score = score
        self.valid = valid
        self.dynamic = dynamic
        self.n_neighbors = n_neighbors
        self.n_frames = n_frames
        self.gap_ratio = gap_ratio

    def __len__(self):
        return self.xyz.shape[0]

    @property
    def label(self):
        return self.dynamic

    def point(self, i: int) -> ScoredPoint:
        return ScoredPoint(
            point=TimedPoint(*self.xyz[i], self.t[i]),
            score=float(self.score[i]),
            valid=bool(self.valid[i]),
            label=LABEL_DYNAMIC if self.dynamic[i] else LABEL_STATIC,
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self.point(i)

    def select(self, mask: np.ndarray) -> "ScoredCloud":
        def take(a):
            return a[mask] if a is not None else None
        return ScoredCloud(self.frame_index, self.stamp, self.xyz[mask], self.t[mask],
                           self.score[mask], self.valid[mask], self.dynamic[mask],
                           take(self.n_neighbors), take(self.n_frames),
                           take(self.gap_ratio))


class _MapSnapshot:
    """Grid-sorted copy of the window used by the batch scorer.

    Points are sorted by packed cell key (cell side = search radius);
    occupied cells are kept as a sorted compact array with their run
    bounds, so memory scales with occupancy rather than scene extent.
    """

    __slots__ = ("xyz", "t", "rel_frame", "kmin", "span", "ucells",
                 "cell_starts", "cell_ends", "cell", "window_len")

    def __init__(self, xyz, t, rel_frame, kmin, span, ucells, cell_starts,
                 cell_ends, cell, window_len):
        self.xyz = xyz
        self.t = t
        self.rel_frame = rel_frame
        self.kmin = kmin
        self.span = span
        self.ucells = ucells
        self.cell_starts = cell_starts
        self.cell_ends = cell_ends
        self.cell = cell
        self.window_len = window_len

    def query_ranges(self, q_xyz: np.ndarray):
        """(start, end) candidate runs of the 27 cells around each query."""
        qk = voxel_keys(q_xyz, self.cell) - self.kmin
        nq = qk.shape[0]
        starts = np.zeros((nq, 27), dtype=np.int64)
        ends = np.zeros((nq, 27), dtype=np.int64)
        last = self.ucells.size - 1
        col = 0
        for ox in (-1, 0, 1):
            for oy in (-1, 0, 1):
                for oz in (-1, 0, 1):
                    kx = qk[:, 0] + ox
                    ky = qk[:, 1] + oy
                    kz = qk[:, 2] + oz
                    ok = ((kx >= 0) & (kx < self.span[0])
                          & (ky >= 0) & (ky < self.span[1])
                          & (kz >= 0) & (kz < self.span[2]))
                    cand = np.where(ok, (kx * self.span[1] + ky) * self.span[2] + kz, -1)
                    pos = np.minimum(np.searchsorted(self.ucells, cand), last)
                    hit = ok & (self.ucells[pos] == cand)
                    starts[:, col] = np.where(hit, self.cell_starts[pos], 0)
                    ends[:, col] = np.where(hit, self.cell_ends[pos], 0)
                    col += 1
        return starts, ends


class SlidingMap:
    """FIFO aggregation of the last ``2N + 1`` downsampled frames.

    Pushing a frame evicts the oldest once the window is full and returns
    the middle (N+1-th most recent) frame, which is the one to classify.
    Mutation is single-writer; between pushes the map is immutable and safe
    to score against concurrently.
    """

    def __init__(self, half_window: int):
        if half_window < 1:
            raise ValueError(f"half_window must be >= 1, got {half_window}")
        self.half_window = half_window
        self.window: deque[Cloud] = deque(maxlen=2 * half_window + 1)
        self._ordinals: deque[int] = deque(maxlen=2 * half_window + 1)
        self._push_count = 0
        self._flat = None
        self._snapshot = None
        self._kd = None

    @property
    def window_length(self) -> int:
        return 2 * self.half_window + 1

    @property
    def full(self) -> bool:
        return len(self.window) == self.window_length

    def __len__(self) -> int:
        return sum(len(c) for c in self.window)

    def push(self, cloud: Cloud) -> Cloud | None:
        """Add a downsampled, registered frame. Returns the frame to classify
        once the window is full, else None."""
        if self.window and cloud.frame_index <= self.window[-1].frame_index:
            raise FrameOrderError(
                f"frame index {cloud.frame_index} does not increase past "
                f"{self.window[-1].frame_index}")
        self.window.append(cloud)
        self._ordinals.append(self._push_count)
        self._push_count += 1
        self._flat = None
        self._snapshot = None
        self._kd = None
        if self.full:
            return self.window[self.half_window]
        return None

    @property
    def target(self) -> Cloud:
        if not self.full:
            raise WindowNotFullError(
                f"window holds {len(self.window)}/{self.window_length} frames")
        return self.window[self.half_window]

    def _flat_arrays(self):
        if self._flat is None:
            base = self._ordinals[0]
            xyz = np.ascontiguousarray(np.vstack([c.xyz for c in self.window]))
            t = np.concatenate([c.t for c in self.window])
            rel = np.concatenate([
                np.full(len(c), o - base, dtype=np.int32)
                for c, o in zip(self.window, self._ordinals)
            ])
            frames = np.concatenate([
                np.full(len(c), c.frame_index, dtype=np.int64) for c in self.window
            ])
            self._flat = (xyz, t, rel, frames)
        return self._flat

    @property
    def flat_points(self) -> np.ndarray:
        """(M, 4) stacked [x, y, z, t] of every point currently in the map."""
        xyz, t, _, _ = self._flat_arrays()
        return np.column_stack([xyz, t])

    @property
    def flat_xyz(self) -> np.ndarray:
        return self._flat_arrays()[0]

    @property
    def flat_t(self) -> np.ndarray:
        return self._flat_arrays()[1]

    @property
    def flat_frame_index(self) -> np.ndarray:
        return self._flat_arrays()[3]

    @property
    def index(self) -> KdIndex:
        """kd-tree over the spatial coordinates of the current window."""
        if self._kd is None:
            self._kd = KdIndex(self.flat_xyz) if self.window else KdIndex(np.empty((0, 3)))
        return self._kd

    def prepare(self, cell: float) -> _MapSnapshot:
        """Build (or reuse) the grid-sorted snapshot for batch scoring."""
        if self._snapshot is not None and self._snapshot.cell == cell:
            return self._snapshot
        xyz, t, rel, _ = self._flat_arrays()
        keys = voxel_keys(xyz, cell)
        kmin = keys.min(axis=0)
        span = keys.max(axis=0) - kmin + 1
        if int(span[0]) * int(span[1]) * int(span[2]) >= 2**62:
            raise ValueError("map extent too large for the given search radius")
        rel_keys = keys - kmin
        packed = (rel_keys[:, 0] * span[1] + rel_keys[:, 1]) * span[2] + rel_keys[:, 2]
        order = np.argsort(packed, kind="stable")
        packed = packed[order]
        change = np.empty(packed.size, dtype=bool)
        change[0] = True
        np.not_equal(packed[1:], packed[:-1], out=change[1:])
        cell_starts = np.flatnonzero(change)
        self._snapshot = _MapSnapshot(
            np.ascontiguousarray(xyz[order]), t[order],
            np.ascontiguousarray(rel[order]), kmin, span,
            packed[cell_starts], cell_starts,
            np.append(cell_starts[1:], packed.size), cell, self.window_length)
        return self._snapshot


def push_cloud(sliding_map: SlidingMap, cloud: Cloud) -> Cloud | None:
    return sliding_map.push(cloud)


def spatiotemporal_covariance(neighbors, time_scale: float = 1.0):
    """Population mean and covariance of 4D [x, y, z, t] samples.

    ``neighbors`` is an (K, 4) array or an iterable of TimedPoint. Uses the
    two-pass formula (subtract mean, then accumulate outer products) with
    1/K normalization. Returns (mean (4,), cov (4, 4)).
    """
    pts = np.asarray(
        neighbors if isinstance(neighbors, np.ndarray)
        else [[p.x, p.y, p.z, p.t] for p in neighbors],
        dtype=np.float64,
    )
    if pts.size == 0:
        raise ValueError("empty neighborhood")
    pts = pts.reshape(-1, 4)
    if time_scale != 1.0:
        pts = pts.copy()
        pts[:, 3] *= time_scale
    mean = pts.mean(axis=0)
    centered = pts - mean
    cov = centered.T @ centered / pts.shape[0]
    return mean, cov


def _guarded_result(n_neighbors: int, n_frames: int, params: Params) -> bool:
    return n_neighbors >= params.min_neighbors and n_frames >= params.min_distinct_frames


def dynamic_score(point: TimedPoint, sliding_map: SlidingMap, params: Params) -> ScoredPoint:
    """Score one point of the classification target against the full window.

    Reference (per-point) path: kd-tree radius query, two-pass covariance,
    Jacobi eigensolver. The batch scorer in score_cloud computes the same
    quantity for a whole frame at once.
    """
    if not sliding_map.full:
        raise WindowNotFullError(
            f"window holds {len(sliding_map.window)}/{sliding_map.window_length} frames")
    idx = sliding_map.index.radius_query(point.xyz, params.radius)
    frames = sliding_map.flat_frame_index[idx]
    n_frames = int(np.unique(frames).size)
    if not _guarded_result(idx.size, n_frames, params):
        return ScoredPoint(point=point, score=0.0, valid=False, label=LABEL_STATIC)
    samples = np.column_stack([sliding_map.flat_xyz[idx], sliding_map.flat_t[idx]])
    _, cov = spatiotemporal_covariance(samples, time_scale=params.time_scale)
    result = smallest_eigenvector(cov)
    score = min(abs(float(result.eigenvector[3])), 1.0)
    label = LABEL_DYNAMIC if score > params.threshold else LABEL_STATIC
    return ScoredPoint(point=point, score=score, valid=True, label=label)


def score_cloud(cloud: Cloud, sliding_map: SlidingMap, params: Params) -> ScoredCloud:
    """Score every point of ``cloud`` (the window's middle frame) in order."""
    if not sliding_map.full:
        raise WindowNotFullError(
            f"window holds {len(sliding_map.window)}/{sliding_map.window_length} frames")
    snap = sliding_map.prepare(params.radius)
    starts, ends = snap.query_ranges(cloud.xyz)
    scores, valid, n_nb, n_fr, gap = _kernels.score_points(
        snap.xyz, snap.t, snap.rel_frame, starts, ends,
        cloud.xyz, cloud.t, params.radius,
        params.min_neighbors, params.min_distinct_frames,
        snap.window_len, params.time_scale)
    dynamic = valid & (scores > params.threshold)
    return ScoredCloud(cloud.frame_index, cloud.stamp, cloud.xyz, cloud.t,
                       scores, valid, dynamic, n_nb, n_fr, gap)


def classify_cloud(cloud: Cloud, sliding_map: SlidingMap, params: Params):
    """Partition the frame's points into (dynamic, static) ScoredClouds.

    Each part preserves the input point order; every point is scored
    exactly once.
    """
    scored = score_cloud(cloud, sliding_map, params)
    return scored.select(scored.dynamic), scored.select(~scored.dynamic)


def upsample_labels(full_cloud: Cloud, dynamic_points, radius: float = 0.5) -> np.ndarray:
    """Transfer dynamic labels to a full-resolution frame.

    A full-resolution point is dynamic iff it lies within ``radius``
    (3D closed ball) of at least one dynamic downsampled point. Returns a
    boolean array aligned with ``full_cloud``.
    """
    if radius <= 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    dyn_xyz = _as_xyz(dynamic_points)
    labels = np.zeros(len(full_cloud), dtype=bool)
    if dyn_xyz.shape[0] == 0:
        return labels
    # cheap bounding-box prefilter before the tree query
    lo = dyn_xyz.min(axis=0) - radius
    hi = dyn_xyz.max(axis=0) + radius
    near = np.all((full_cloud.xyz >= lo) & (full_cloud.xyz <= hi), axis=1)
    if not near.any():
        return labels
    labels[near] = KdIndex(dyn_xyz).nearest_within(full_cloud.xyz[near], radius)
    return labels


def _as_xyz(points) -> np.ndarray:
    if isinstance(points, ScoredCloud):
        return points.xyz
    if isinstance(points, Cloud):
        return points.xyz
    arr = np.asarray(points, dtype=np.float64) if not isinstance(points, (list, tuple)) \
        else None
    if arr is not None and arr.ndim == 2 and arr.shape[1] >= 3:
        return arr[:, :3]
    points = list(points)
    if not points:
        return np.empty((0, 3))
    first = points[0]
    if isinstance(first, ScoredPoint):
        return np.array([[p.point.x, p.point.y, p.point.z] for p in points])
    if isinstance(first, TimedPoint):
        return np.array([[p.x, p.y, p.z] for p in points])
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


def latency(params: Params, frame_rate: float) -> float:
    """Detection delay in seconds: half_window / frame_rate."""
    if frame_rate <= 0:
        raise ValueError(f"frame rate must be > 0, got {frame_rate}")
    return params.half_window / frame_rate
