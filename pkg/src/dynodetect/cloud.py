"""Timestamped point-cloud types, file I/O, and pose application.

A frame is stored as flat numpy arrays (one row per point) rather than a
list of point objects; ``TimedPoint`` exists for single-point access.
Supported formats:

* CSV with header ``x,y,z,t[,score,label]``, ``.`` decimal separator.
* PLY (ascii or binary little-endian) with vertex properties
  ``float x, float y, float z, double t`` and optionally
  ``double score, uchar label``.
* Pose trajectory: whitespace-separated ``stamp tx ty tz qx qy qz qw``
  lines, ``#`` comments ignored.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .errors import (
    CloudFormatError,
    EmptyCloudError,
    MissingFieldError,
    PoseRangeError,
)

__all__ = [
    "TimedPoint",
    "Cloud",
    "Pose",
    "read_cloud",
    "read_scored_cloud",
    "write_cloud",
    "read_poses",
    "apply_registration",
    "guess_format",
]


@dataclass(frozen=True)
class TimedPoint:
    """One range return: world-frame position (m) and timestamp (s)."""

    x: float
    y: float
    z: float
    t: float

    @property
    def xyz(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def xyzt(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.t])


@dataclass(frozen=True, eq=False)
class Cloud:
    """One sensor frame: point positions, per-point timestamps, frame metadata.

    ``xyz`` is (N, 3) float64, ``t`` is (N,) float64. All values must be
    finite; readers drop non-finite rows before construction and record the
    count in ``rejected_points``.
    """

    xyz: np.ndarray
    t: np.ndarray
    frame_index: int = 0
    stamp: float = float("nan")
    rejected_points: int = 0

    def __post_init__(self):
        xyz = np.ascontiguousarray(np.asarray(self.xyz, dtype=np.float64))
        t = np.ascontiguousarray(np.asarray(self.t, dtype=np.float64))
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ValueError(f"xyz must be (N, 3), got {xyz.shape}")
        if t.shape != (xyz.shape[0],):
            raise ValueError(f"t must be ({xyz.shape[0]},), got {t.shape}")
        if xyz.shape[0] == 0:
            raise EmptyCloudError("cloud has no points")
        if not np.isfinite(xyz).all() or not np.isfinite(t).all():
            raise ValueError("cloud contains non-finite coordinates or timestamps")
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "t", t)
        if math.isnan(self.stamp):
            object.__setattr__(self, "stamp", float(np.median(t)))

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def point(self, i: int) -> TimedPoint:
        return TimedPoint(*self.xyz[i], self.t[i])

    def __iter__(self) -> Iterator[TimedPoint]:
        for i in range(len(self)):
            yield self.point(i)

    def validate_stamps(self, frame_period: float) -> None:
        """Check every per-point t lies within one frame period of the stamp."""
        lo, hi = self.stamp - frame_period, self.stamp + frame_period
        bad = int(np.sum((self.t < lo) | (self.t > hi)))
        if bad:
            raise ValueError(
                f"{bad} point timestamps outside [{lo:.6f}, {hi:.6f}] "
                f"for frame {self.frame_index} (stamp {self.stamp:.6f})"
            )


@dataclass(frozen=True)
class Pose:
    """Rigid transform sensor->world at a given time.

    ``rotation`` is a unit quaternion stored as (w, x, y, z).
    """

    translation: np.ndarray
    rotation: np.ndarray
    stamp: float

    def __post_init__(self):
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        norm = float(np.linalg.norm(q))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {norm:.9f} differs from 1 by more than 1e-6")
        object.__setattr__(self, "translation", tr)
        object.__setattr__(self, "rotation", q / norm)

    def matrix(self) -> np.ndarray:
        w, x, y, z = self.rotation
        return Rotation.from_quat([x, y, z, w]).as_matrix()

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        return xyz @ self.matrix().T + self.translation


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "int8": "i1", "uint8": "u1",
    "short": "i2", "ushort": "u2", "int16": "i2", "uint16": "u2",
    "int": "i4", "uint": "u4", "int32": "i4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def guess_format(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return "ply"
    if suffix == ".csv":
        return "csv"
    raise CloudFormatError(f"cannot infer format from suffix {suffix!r}", path=str(path))


def read_cloud(path, fmt: str | None = None, *, frame_index: int = 0,
               fill_t: float | None = None) -> Cloud:
    """Load a timestamped cloud from ``path``.

    ``fill_t`` assigns that timestamp to every point when the file has no
    per-point ``t`` column/property; without it a missing ``t`` is an error.
    Rows with non-finite values are dropped and counted in
    ``Cloud.rejected_points``.
    """
    cloud, _ = _read_cloud_full(path, fmt, frame_index=frame_index, fill_t=fill_t)
    return cloud


def read_scored_cloud(path, fmt: str | None = None, *, frame_index: int = 0):
    """Load a cloud along with its ``score`` and ``label`` columns.

    Returns ``(cloud, scores, labels)`` where labels is a boolean array
    (True = dynamic). Raises MissingFieldError when the file carries no
    score/label data.
    """
    cloud, extras = _read_cloud_full(path, fmt, frame_index=frame_index, fill_t=None)
    if "score" not in extras or "label" not in extras:
        raise MissingFieldError("score/label", path=str(path))
    return cloud, extras["score"], extras["label"]


def _read_cloud_full(path, fmt, *, frame_index, fill_t):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"cloud file not found: {path}")
    fmt = fmt or guess_format(path)
    if fmt == "csv":
        cols = _read_csv(path)
    elif fmt == "ply":
        cols = _read_ply(path)
    else:
        raise CloudFormatError(f"unsupported format {fmt!r}", path=str(path))

    for name in ("x", "y", "z"):
        if name not in cols:
            raise MissingFieldError(name, path=str(path))
    if "t" not in cols:
        if fill_t is None:
            raise MissingFieldError("t", path=str(path))
        cols["t"] = np.full(cols["x"].shape, float(fill_t))

    xyz = np.column_stack([cols["x"], cols["y"], cols["z"]]).astype(np.float64)
    t = cols["t"].astype(np.float64)
    finite = np.isfinite(xyz).all(axis=1) & np.isfinite(t)
    rejected = int((~finite).sum())
    if rejected:
        warnings.warn(f"{path.name}: dropped {rejected} non-finite points")
        xyz, t = xyz[finite], t[finite]
    if xyz.shape[0] == 0:
        raise EmptyCloudError(f"no valid points in {path}")

    extras = {}
    if "score" in cols:
        extras["score"] = cols["score"].astype(np.float64)[finite] if rejected else cols["score"].astype(np.float64)
    if "label" in cols:
        lab = cols["label"]
        extras["label"] = lab[finite] if rejected else lab
    cloud = Cloud(xyz, t, frame_index=frame_index, rejected_points=rejected)
    return cloud, extras


def _read_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        names = [c.strip() for c in header.split(",")]
        if names[:3] != ["x", "y", "z"]:
            raise CloudFormatError(f"CSV header must start with x,y,z (got {header!r})",
                                   path=str(path), line=1)
        want_label = "label" in names
        label_col = names.index("label") if want_label else -1
        numeric_cols = [i for i, n in enumerate(names) if n != "label"]
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")  # empty files are handled below
                data = np.loadtxt(fh, delimiter=",", usecols=numeric_cols,
                                  dtype=np.float64, ndmin=2)
        except ValueError:
            return _read_csv_slow(path, names, numeric_cols, label_col)
    cols = {names[i]: data[:, k] for k, i in enumerate(numeric_cols)}
    if want_label:
        with open(path, "r", encoding="utf-8") as fh:
            fh.readline()
            raw = np.loadtxt(fh, delimiter=",", usecols=label_col, dtype=str,
                             ndmin=1)
        cols["label"] = (raw == "dynamic") | (raw == "1")
    return cols


def _read_csv_slow(path, names, numeric_cols, label_col):
    """Row-by-row reparse that pins parse errors to a line number."""
    rows = []
    labels = []
    with open(path, "r", encoding="utf-8") as fh:
        fh.readline()
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(names):
                raise CloudFormatError(
                    f"expected {len(names)} fields, got {len(parts)}",
                    path=str(path), line=lineno)
            try:
                rows.append([float(parts[i]) for i in numeric_cols])
            except ValueError as exc:
                raise CloudFormatError(f"bad value: {exc}", path=str(path),
                                       line=lineno) from exc
            if label_col >= 0:
                labels.append(parts[label_col].strip())
    data = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(numeric_cols))
    cols = {names[i]: data[:, k] for k, i in enumerate(numeric_cols)}
    if label_col >= 0:
        cols["label"] = np.array([lab == "dynamic" or lab == "1" for lab in labels])
    return cols


def _read_ply(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"ply":
            raise CloudFormatError("not a PLY file (missing 'ply' magic)", path=str(path), line=1)
        binary = None
        n_vertex = None
        props = []
        lineno = 1
        while True:
            raw = fh.readline()
            lineno += 1
            if not raw:
                raise CloudFormatError("unexpected end of header", path=str(path), line=lineno)
            tokens = raw.decode("ascii", errors="replace").split()
            if not tokens or tokens[0] == "comment":
                continue
            if tokens[0] == "format":
                if tokens[1] == "ascii":
                    binary = False
                elif tokens[1] == "binary_little_endian":
                    binary = True
                else:
                    raise CloudFormatError(f"unsupported PLY format {tokens[1]!r}",
                                           path=str(path), line=lineno)
            elif tokens[0] == "element":
                if tokens[1] != "vertex":
                    raise CloudFormatError(f"unsupported PLY element {tokens[1]!r}",
                                           path=str(path), line=lineno)
                n_vertex = int(tokens[2])
            elif tokens[0] == "property":
                if tokens[1] == "list":
                    raise CloudFormatError("list properties are not supported",
                                           path=str(path), line=lineno)
                if tokens[1] not in _PLY_TYPES:
                    raise CloudFormatError(f"unknown property type {tokens[1]!r}",
                                           path=str(path), line=lineno)
                props.append((tokens[2], _PLY_TYPES[tokens[1]]))
            elif tokens[0] == "end_header":
                break
        if binary is None or n_vertex is None:
            raise CloudFormatError("PLY header missing format or vertex element",
                                   path=str(path), line=lineno)
        dtype = np.dtype([(name, "<" + code) for name, code in props])
        if binary:
            data = np.fromfile(fh, dtype=dtype, count=n_vertex)
            if data.shape[0] != n_vertex:
                raise CloudFormatError(
                    f"expected {n_vertex} vertices, file holds {data.shape[0]}",
                    path=str(path))
        else:
            try:
                data = np.loadtxt(fh, dtype=dtype, max_rows=n_vertex, ndmin=1)
            except ValueError as exc:
                raise CloudFormatError(f"bad vertex data: {exc}", path=str(path)) from exc
            if data.shape[0] != n_vertex:
                raise CloudFormatError(
                    f"expected {n_vertex} vertices, file holds {data.shape[0]}",
                    path=str(path))
    cols = {name: np.asarray(data[name], dtype=np.float64) for name, _ in props}
    if "label" in cols:
        cols["label"] = cols["label"] != 0
    return cols


def write_cloud(cloud, path, fmt: str | None = None, *, scores=None, labels=None,
                ascii_ply: bool = False) -> None:
    """Write a cloud (optionally with per-point scores and dynamic labels).

    ``cloud`` may be a Cloud or any sequence of objects exposing
    ``x, y, z, t`` plus optionally ``score`` and ``label`` attributes
    (e.g. ScoredPoint). CSV values are written with 17 significant digits so
    a read/write round trip is bit-exact.
    """
    xyz, t, scores, labels = _coerce_writable(cloud, scores, labels)
    path = Path(path)
    fmt = fmt or guess_format(path)
    try:
        if fmt == "csv":
            _write_csv(path, xyz, t, scores, labels)
        elif fmt == "ply":
            _write_ply(path, xyz, t, scores, labels, ascii_ply)
        else:
            raise CloudFormatError(f"unsupported format {fmt!r}", path=str(path))
    except OSError as exc:
        raise OSError(f"cannot write cloud to {path}: {exc}") from exc


def _coerce_writable(cloud, scores, labels):
    if isinstance(cloud, Cloud):
        xyz, t = cloud.xyz, cloud.t
    elif hasattr(cloud, "xyz") and hasattr(cloud, "t"):
        xyz, t = np.asarray(cloud.xyz, dtype=np.float64), np.asarray(cloud.t, dtype=np.float64)
        if scores is None:
            scores = getattr(cloud, "score", None)
        if labels is None:
            labels = getattr(cloud, "label", None)
    else:
        points = list(cloud)
        if not points:
            raise EmptyCloudError("cannot write an empty point list")
        xyz = np.array([[p.x, p.y, p.z] for p in points])
        t = np.array([p.t for p in points])
        if scores is None and hasattr(points[0], "score"):
            scores = np.array([p.score for p in points])
        if labels is None and hasattr(points[0], "label"):
            labels = np.array([p.label for p in points])
    if xyz.shape[0] == 0:
        raise EmptyCloudError("cannot write an empty cloud")
    if scores is not None:
        scores = np.asarray(scores, dtype=np.float64)
    if labels is not None:
        labels = np.asarray(labels, dtype=bool)
    return xyz, t, scores, labels


def _write_csv(path, xyz, t, scores, labels):
    columns = [xyz[:, 0], xyz[:, 1], xyz[:, 2], t]
    header = "x,y,z,t"
    if scores is not None:
        columns.append(scores)
        header += ",score"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + (",label\n" if labels is not None else "\n"))
        if labels is None:
            np.savetxt(fh, np.column_stack(columns), fmt="%.17g", delimiter=",")
        else:
            for i in range(xyz.shape[0]):
                row = ",".join(f"{c[i]:.17g}" for c in columns)
                fh.write(row + (",dynamic\n" if labels[i] else ",static\n"))


def _write_ply(path, xyz, t, scores, labels, ascii_ply):
    n = xyz.shape[0]
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("t", "<f8")]
    prop_lines = ["property float x", "property float y", "property float z",
                  "property double t"]
    if scores is not None:
        fields.append(("score", "<f8"))
        prop_lines.append("property double score")
    if labels is not None:
        fields.append(("label", "u1"))
        prop_lines.append("property uchar label")
    rec = np.empty(n, dtype=np.dtype(fields))
    rec["x"], rec["y"], rec["z"] = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    rec["t"] = t
    if scores is not None:
        rec["score"] = scores
    if labels is not None:
        rec["label"] = labels.astype(np.uint8)
    header = ["ply",
              "format ascii 1.0" if ascii_ply else "format binary_little_endian 1.0",
              f"element vertex {n}", *prop_lines, "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if ascii_ply:
            for i in range(n):
                row = rec[i]
                fh.write(" ".join(
                    str(int(row[name])) if rec.dtype[name].kind == "u"
                    else f"{float(row[name]):.17g}"
                    for name in rec.dtype.names).encode("ascii") + b"\n")
        else:
            rec.tofile(fh)


def read_poses(path) -> list[Pose]:
    """Load a pose trajectory file, sorted by timestamp."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"pose file not found: {path}")
    poses = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 8:
                raise CloudFormatError(
                    f"pose line needs 8 fields (stamp tx ty tz qx qy qz qw), got {len(parts)}",
                    path=str(path), line=lineno)
            try:
                stamp, tx, ty, tz, qx, qy, qz, qw = (float(v) for v in parts)
            except ValueError as exc:
                raise CloudFormatError(f"bad pose value: {exc}", path=str(path),
                                       line=lineno) from exc
            poses.append(Pose(translation=(tx, ty, tz), rotation=(qw, qx, qy, qz),
                              stamp=stamp))
    poses.sort(key=lambda p: p.stamp)
    return poses


def apply_registration(cloud: Cloud, poses: Sequence[Pose],
                       interpolation: str = "linear",
                       max_extrapolation: float | None = None) -> Cloud:
    """Transform a sensor-frame cloud into the world frame.

    The pose is selected (``nearest``) or interpolated (``linear``: lerp on
    translation, slerp on rotation) at ``cloud.stamp``. Stamps outside the
    trajectory are accepted only within ``max_extrapolation`` seconds of the
    nearest endpoint, in which case that endpoint pose is used.
    """
    if not poses:
        raise PoseRangeError("empty pose list")
    if interpolation not in ("nearest", "linear"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    stamps = np.array([p.stamp for p in poses])
    order = np.argsort(stamps, kind="stable")
    stamps = stamps[order]
    poses = [poses[i] for i in order]
    query = cloud.stamp

    if query < stamps[0] or query > stamps[-1]:
        slack = max_extrapolation or 0.0
        if query < stamps[0] - slack or query > stamps[-1] + slack:
            raise PoseRangeError(
                f"cloud stamp {query:.6f} outside pose range "
                f"[{stamps[0]:.6f}, {stamps[-1]:.6f}]")
        pose = poses[0] if query < stamps[0] else poses[-1]
    elif interpolation == "nearest" or len(poses) == 1:
        pose = poses[int(np.argmin(np.abs(stamps - query)))]
    else:
        hi = int(np.searchsorted(stamps, query, side="left"))
        if stamps[hi] == query:
            pose = poses[hi]
        else:
            lo = hi - 1
            w = (query - stamps[lo]) / (stamps[hi] - stamps[lo])
            trans = (1.0 - w) * poses[lo].translation + w * poses[hi].translation
            key_rots = Rotation.from_quat([
                poses[lo].rotation[[1, 2, 3, 0]],
                poses[hi].rotation[[1, 2, 3, 0]],
            ])
            rot = Slerp([0.0, 1.0], key_rots)(w)
            qx, qy, qz, qw = rot.as_quat()
            pose = Pose(translation=trans, rotation=(qw, qx, qy, qz), stamp=query)

    if interpolation == "nearest" and abs(pose.stamp - query) > (max_extrapolation or np.inf):
        raise PoseRangeError(
            f"nearest pose at {pose.stamp:.6f} is further than "
            f"{max_extrapolation}s from cloud stamp {query:.6f}")

    return Cloud(pose.apply(cloud.xyz), cloud.t, frame_index=cloud.frame_index,
                 stamp=cloud.stamp, rejected_points=cloud.rejected_points)
